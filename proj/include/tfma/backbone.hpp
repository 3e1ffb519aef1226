#pragma once

#include <string>
#include <vector>

#include "tfma/maskattn.hpp"

namespace tfma::backbone {

struct StageConfig {
  std::size_t blocks = 2;
  std::size_t channels = 16;
  bool mask_enabled = true;
};

struct BackboneConfig {
  std::size_t input_channels = 7;
  std::size_t stem_channels = 16;
  std::size_t stem_stride = 2;
  std::vector<StageConfig> stages{{2, 16, true}, {2, 32, true}, {2, 64, true}};
  double init_threshold = 0.0;

  std::size_t feature_dim() const { return stages.empty() ? stem_channels : stages.back().channels; }

  void set_masks(bool on) {
    for (auto& s : stages) s.mask_enabled = on;
  }

  void validate() const {
    if (input_channels == 0 || stem_channels == 0) throw ConfigError("backbone channel counts must be positive");
    if (stem_stride != 1 && stem_stride != 2) throw ConfigError("stem stride must be 1 or 2");
    for (const auto& s : stages)
      if (s.channels == 0) throw ConfigError("stage channel counts must be positive");
  }
};

/// Unmasked norm -> ReLU -> 3x3 convolution with configurable stride; used for
/// the stem-to-stage transition and between stages.
class ConvUnit {
 public:
  ConvUnit() = default;
  ConvUnit(std::size_t in, std::size_t out, std::size_t stride, bool pre_norm, Rng& rng)
      : stride_(stride),
        pre_norm_(pre_norm),
        kernel_(he_normal(Shape{out, in, 3, 3}, in * 9, rng)),
        scale_(Shape{in}, 1.0, true),
        shift_(Shape{in}, 0.0, true),
        stats_(in) {}

  Tensor forward(const Tensor& x, Mode mode) {
    const Tensor h = pre_norm_ ? relu(channel_norm(x, scale_, shift_, stats_, mode)) : x;
    return conv2d(h, kernel_, stride_, 1);
  }

  Tensor& kernel() { return kernel_; }
  Tensor& scale() { return scale_; }
  Tensor& shift() { return shift_; }
  RunningStats& stats() { return stats_; }
  std::size_t stride() const { return stride_; }
  bool pre_norm() const { return pre_norm_; }

  void parameters(std::vector<Tensor>& out) const {
    out.push_back(kernel_);
    if (pre_norm_) {
      out.push_back(scale_);
      out.push_back(shift_);
    }
  }
  void export_state(const std::string& prefix, std::vector<NamedTensor>& out) const {
    out.push_back({prefix + ".conv.kernel", kernel_});
    if (pre_norm_) {
      out.push_back({prefix + ".norm.scale", scale_});
      out.push_back({prefix + ".norm.shift", shift_});
      export_stats(stats_, prefix + ".norm", out);
    }
  }
  void import_state(const std::string& prefix, const StateMap& state) {
    restore_into(kernel_, state, prefix + ".conv.kernel");
    if (pre_norm_) {
      restore_into(scale_, state, prefix + ".norm.scale");
      restore_into(shift_, state, prefix + ".norm.shift");
      import_stats(stats_, state, prefix + ".norm");
    }
  }

 private:
  std::size_t stride_ = 1;
  bool pre_norm_ = true;
  Tensor kernel_;
  Tensor scale_;
  Tensor shift_;
  RunningStats stats_{1};
};

/// Stem convolution, stages of attention residual blocks joined by stride-2
/// convolutions, then norm -> ReLU -> global average pooling to [N, D].
class Backbone {
 public:
  Backbone(const BackboneConfig& cfg, Rng& rng) : config_(cfg) {
    cfg.validate();
    stem_ = ConvUnit(cfg.input_channels, cfg.stem_channels, cfg.stem_stride, false, rng);
    std::size_t channels = cfg.stem_channels;
    for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
      const StageConfig& st = cfg.stages[s];
      transitions_.emplace_back();
      has_transition_.push_back(s > 0 || st.channels != channels);
      if (has_transition_.back()) transitions_.back() = ConvUnit(channels, st.channels, s > 0 ? 2 : 1, true, rng);
      channels = st.channels;
      std::vector<maskattn::AttentionResidualBlock> blocks;
      for (std::size_t b = 0; b < st.blocks; ++b)
        blocks.emplace_back(maskattn::AttentionBlockConfig{st.channels, cfg.init_threshold, st.mask_enabled}, rng);
      stages_.push_back(std::move(blocks));
    }
    head_scale_ = Tensor(Shape{channels}, 1.0, true);
    head_shift_ = Tensor(Shape{channels}, 0.0, true);
    head_stats_ = RunningStats(channels);
  }

  const BackboneConfig& config() const { return config_; }
  std::size_t feature_dim() const { return config_.feature_dim(); }

  Tensor forward(const Tensor& x, Mode mode) {
    if (x.rank() != 4 || x.dim(1) != config_.input_channels) {
      throw ShapeError("backbone expects [N," + std::to_string(config_.input_channels) + ",H,W], got " +
                       shape_str(x.shape()));
    }
    Tensor h = stem_.forward(x, mode);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      if (has_transition_[s]) h = transitions_[s].forward(h, mode);
      for (auto& block : stages_[s]) h = block.forward(h, mode);
    }
    return global_avg_pool(relu(channel_norm(h, head_scale_, head_shift_, head_stats_, mode)));
  }

  /// Thresholds of all masked blocks, in network order.
  maskattn::MaskThresholds thresholds() {
    maskattn::MaskThresholds t;
    for (auto& stage : stages_)
      for (auto& b : stage)
        if (b.masked()) t.layers.push_back(b.threshold());
    return t;
  }

  /// Mask occupancy of each masked block since the last reset.
  std::vector<double> occupancy() const {
    std::vector<double> out;
    for (const auto& stage : stages_)
      for (const auto& b : stage)
        if (b.masked()) out.push_back(b.occupancy());
    return out;
  }
  void reset_occupancy() {
    for (auto& stage : stages_)
      for (auto& b : stage) b.reset_occupancy();
  }

  ConvUnit& stem() { return stem_; }
  ConvUnit& transition(std::size_t s) { return transitions_.at(s); }
  bool has_transition(std::size_t s) const { return has_transition_.at(s); }
  maskattn::AttentionResidualBlock& block(std::size_t s, std::size_t b) { return stages_.at(s).at(b); }
  Tensor& head_scale() { return head_scale_; }
  Tensor& head_shift() { return head_shift_; }
  RunningStats& head_stats() { return head_stats_; }

  void parameters(std::vector<Tensor>& out) const {
    stem_.parameters(out);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      if (has_transition_[s]) transitions_[s].parameters(out);
      for (const auto& b : stages_[s]) b.parameters(out);
    }
    out.push_back(head_scale_);
    out.push_back(head_shift_);
  }

  std::size_t parameter_count() const {
    std::vector<Tensor> p;
    parameters(p);
    std::size_t n = 0;
    for (const auto& t : p) n += t.numel();
    return n;
  }

  void export_state(const std::string& prefix, std::vector<NamedTensor>& out) const {
    stem_.export_state(prefix + ".stem", out);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const std::string sp = prefix + ".stage" + std::to_string(s);
      if (has_transition_[s]) transitions_[s].export_state(sp + ".down", out);
      for (std::size_t b = 0; b < stages_[s].size(); ++b) stages_[s][b].export_state(sp + ".block" + std::to_string(b), out);
    }
    out.push_back({prefix + ".head.scale", head_scale_});
    out.push_back({prefix + ".head.shift", head_shift_});
    export_stats(head_stats_, prefix + ".head", out);
  }

  void import_state(const std::string& prefix, const StateMap& state) {
    stem_.import_state(prefix + ".stem", state);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const std::string sp = prefix + ".stage" + std::to_string(s);
      if (has_transition_[s]) transitions_[s].import_state(sp + ".down", state);
      for (std::size_t b = 0; b < stages_[s].size(); ++b) stages_[s][b].import_state(sp + ".block" + std::to_string(b), state);
    }
    restore_into(head_scale_, state, prefix + ".head.scale");
    restore_into(head_shift_, state, prefix + ".head.shift");
    import_stats(head_stats_, state, prefix + ".head");
  }

 private:
  BackboneConfig config_;
  ConvUnit stem_;
  std::vector<ConvUnit> transitions_;
  std::vector<bool> has_transition_;
  std::vector<std::vector<maskattn::AttentionResidualBlock>> stages_;
  Tensor head_scale_;
  Tensor head_shift_;
  RunningStats head_stats_{1};
};

}  // namespace tfma::backbone
