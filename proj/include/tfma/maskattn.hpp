#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "tfma/checkpoint.hpp"
#include "tfma/ops.hpp"
#include "tfma/rng.hpp"

namespace tfma {

/// Name -> tensor lookup used when restoring module state.
using StateMap = std::map<std::string, Tensor>;

inline StateMap to_state_map(const std::vector<NamedTensor>& tensors) {
  StateMap m;
  for (const auto& t : tensors) m[t.name] = t.value;
  return m;
}

inline void restore_into(Tensor& target, const StateMap& state, const std::string& name) {
  auto it = state.find(name);
  if (it == state.end()) throw DataError("checkpoint is missing tensor '" + name + "'");
  if (it->second.shape() != target.shape()) {
    throw DataError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                    ", expected " + shape_str(target.shape()));
  }
  std::copy(it->second.data().begin(), it->second.data().end(), target.data().begin());
}

inline void export_stats(const RunningStats& stats, const std::string& prefix, std::vector<NamedTensor>& out) {
  out.push_back({prefix + ".running_mean", Tensor::vector(stats.mean)});
  out.push_back({prefix + ".running_var", Tensor::vector(stats.var)});
}

inline void import_stats(RunningStats& stats, const StateMap& state, const std::string& prefix) {
  Tensor mean = Tensor::vector(stats.mean), var = Tensor::vector(stats.var);
  restore_into(mean, state, prefix + ".running_mean");
  restore_into(var, state, prefix + ".running_var");
  stats.mean.assign(mean.data().begin(), mean.data().end());
  stats.var.assign(var.data().begin(), var.data().end());
}

/// He-normal initialized tensor for a layer with `fan_in` inputs.
inline Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape), 0.0, true);
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.data()) v = rng.normal(0.0, sd);
  return t;
}

namespace maskattn {

/// Surrogate derivative of the binary step:
///   2 - 4|z| for |z| <= 0.4, 0.4 for 0.4 <= |z| <= 1, 0 beyond.
inline double step_derivative(double z) {
  const double a = std::abs(z);
  if (a <= 0.4) return 2.0 - 4.0 * a;
  if (a <= 1.0) return 0.4;
  return 0.0;
}

/// Binary step with a closed lower boundary: S(0) = 1.
inline double step_value(double z) { return z >= 0.0 ? 1.0 : 0.0; }

inline Tensor step_forward(const Tensor& z) {
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.numel(); ++i) out[i] = step_value(z[i]);
  return out;
}

inline Tensor step_backward(const Tensor& z, const Tensor& upstream) {
  if (z.shape() != upstream.shape()) {
    throw ShapeError("step_backward shape mismatch: " + shape_str(z.shape()) + " vs " + shape_str(upstream.shape()));
  }
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.numel(); ++i) out[i] = upstream[i] * step_derivative(z[i]);
  return out;
}

/// The binary step as a tape operation whose backward is the surrogate
/// derivative above.
inline const OpHandle& binary_step_op() {
  static const OpHandle op = register_custom_vjp(
      [](std::span<const Tensor> in) { return step_forward(in[0]); },
      [](std::span<const Tensor> in, const Tensor& up) { return std::vector<Tensor>{step_backward(in[0], up)}; },
      "binary_step");
  return op;
}

inline Tensor binary_step(const Tensor& z) { return binary_step_op()({z}); }

/// M(x) = S(sigmoid(|x| - theta) - 0.5) with theta broadcast per channel
/// (axis 1). The result is 1 exactly where |x| >= theta.
inline Tensor mask(const Tensor& x, const Tensor& theta) {
  if (x.rank() < 2 || theta.rank() != 1 || theta.numel() != x.dim(1)) {
    throw ShapeError("mask threshold length " + std::to_string(theta.numel()) + " does not match channels of " +
                     shape_str(x.shape()));
  }
  return binary_step(add_scalar(sigmoid(sub(abs(x), theta)), -0.5));
}

/// Learnable thresholds, one vector per attention block (one entry per channel).
struct MaskThresholds {
  std::vector<Tensor> layers;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : layers) n += t.numel();
    return n;
  }
};

/// Sum over layers and channels of exp(-theta).
inline Tensor threshold_regularizer(const MaskThresholds& thresholds) {
  if (thresholds.layers.empty()) return Tensor::scalar(0.0);
  Tensor total = sum(exp(neg(thresholds.layers.front())));
  for (std::size_t l = 1; l < thresholds.layers.size(); ++l) total = add(total, sum(exp(neg(thresholds.layers[l]))));
  return total;
}

struct AttentionBlockConfig {
  std::size_t channels = 16;
  double init_threshold = 0.0;
  bool mask_enabled = true;
};

/// Shape-preserving residual block: Conv(x) * M(x) + x, with Conv realized
/// as norm -> ReLU -> 3x3 same convolution.
class AttentionResidualBlock {
 public:
  AttentionResidualBlock(const AttentionBlockConfig& cfg, Rng& rng)
      : config_(cfg),
        norm_scale_(Shape{cfg.channels}, 1.0, true),
        norm_shift_(Shape{cfg.channels}, 0.0, true),
        kernel_(he_normal(Shape{cfg.channels, cfg.channels, 3, 3}, cfg.channels * 9, rng)),
        stats_(cfg.channels) {
    if (cfg.channels == 0) throw ConfigError("attention block needs at least one channel");
    if (cfg.mask_enabled) threshold_ = Tensor(Shape{cfg.channels}, cfg.init_threshold, true);
  }

  const AttentionBlockConfig& config() const { return config_; }
  bool masked() const { return config_.mask_enabled; }

  Tensor& kernel() { return kernel_; }
  Tensor& threshold() { return threshold_; }
  Tensor& norm_scale() { return norm_scale_; }
  Tensor& norm_shift() { return norm_shift_; }
  RunningStats& stats() { return stats_; }

  /// Conv(x) alone: norm -> ReLU -> 3x3 convolution.
  Tensor conv_branch(const Tensor& x, Mode mode) {
    return conv2d(relu(channel_norm(x, norm_scale_, norm_shift_, stats_, mode)), kernel_, 1, 1);
  }

  Tensor forward(const Tensor& x, Mode mode) {
    if (x.rank() != 4 || x.dim(1) != config_.channels) {
      throw ShapeError("attention block expects [N," + std::to_string(config_.channels) + ",H,W], got " +
                       shape_str(x.shape()));
    }
    Tensor conv = conv_branch(x, mode);
    if (conv.shape() != x.shape()) throw ShapeError("Conv(x) and x disagree in shape");
    if (!config_.mask_enabled) return add(conv, x);
    Tensor m = mask(x, threshold_);
    double ones = 0.0;
    for (double v : m.data()) ones += v;
    ones_ += ones;
    total_ += static_cast<double>(m.numel());
    return add(mul(conv, m), x);
  }

  /// Fraction of mask entries equal to 1 since the last reset.
  double occupancy() const { return total_ > 0 ? ones_ / total_ : 1.0; }
  void reset_occupancy() { ones_ = total_ = 0.0; }

  void parameters(std::vector<Tensor>& out) const {
    out.push_back(norm_scale_);
    out.push_back(norm_shift_);
    out.push_back(kernel_);
    if (config_.mask_enabled) out.push_back(threshold_);
  }

  void export_state(const std::string& prefix, std::vector<NamedTensor>& out) const {
    out.push_back({prefix + ".norm.scale", norm_scale_});
    out.push_back({prefix + ".norm.shift", norm_shift_});
    export_stats(stats_, prefix + ".norm", out);
    out.push_back({prefix + ".conv.kernel", kernel_});
    if (config_.mask_enabled) out.push_back({prefix + ".threshold", threshold_});
  }

  void import_state(const std::string& prefix, const StateMap& state) {
    restore_into(norm_scale_, state, prefix + ".norm.scale");
    restore_into(norm_shift_, state, prefix + ".norm.shift");
    import_stats(stats_, state, prefix + ".norm");
    restore_into(kernel_, state, prefix + ".conv.kernel");
    if (config_.mask_enabled) restore_into(threshold_, state, prefix + ".threshold");
  }

 private:
  AttentionBlockConfig config_;
  Tensor norm_scale_;
  Tensor norm_shift_;
  Tensor kernel_;
  Tensor threshold_;
  RunningStats stats_;
  double ones_ = 0.0;
  double total_ = 0.0;
};

inline Tensor attention_residual_forward(const Tensor& x, AttentionResidualBlock& block, Mode mode) {
  return block.forward(x, mode);
}

}  // namespace maskattn
}  // namespace tfma
