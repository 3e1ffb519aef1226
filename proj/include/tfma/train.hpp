#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tfma/flow.hpp"
#include "tfma/model.hpp"
#include "tfma/openset.hpp"
#include "tfma/sgd.hpp"
#include "tfma/synthdata.hpp"
#include "tfma/tape.hpp"

namespace tfma::train {

using nlohmann::json;

enum class FlowSource { estimated, ground_truth, none };

inline const char* flow_source_name(FlowSource s) {
  switch (s) {
    case FlowSource::estimated: return "estimated";
    case FlowSource::ground_truth: return "ground_truth";
    default: return "none";
  }
}

inline FlowSource flow_source_from_name(const std::string& s) {
  if (s == "estimated") return FlowSource::estimated;
  if (s == "ground_truth") return FlowSource::ground_truth;
  if (s == "none") return FlowSource::none;
  throw ConfigError("flow source must be estimated, ground_truth or none, got '" + s + "'");
}

struct RunConfig {
  std::string dataset;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  backbone::BackboneConfig backbone;
  SgdConfig stage1{0.1, 5e-4, 0.9, 30};
  SgdConfig stage2{0.01, 5e-4, 0.9, 15};
  losses::LossWeights weights;
  openset::OpenMaxConfig openmax;
  synthdata::GroupThresholds groups;
  FlowSource flow = FlowSource::estimated;
  flow::FlowConfig flow_config;
  bool augment = true;
  bool meta_embedding = true;
  bool joint = false;  // skip the representation stage; meta head trained from the start
  bool cosine_lr = true;
  std::size_t batch_size = 8;
  double cosine_scale = 16.0;
  bool softmax_memory = true;

  std::uint64_t require_seed() const {
    if (!seed) throw ConfigError("a seed is required (--seed or \"seed\" in the config)");
    return *seed;
  }

  /// Image channels plus four flow channels unless flow is disabled.
  std::size_t expected_input_channels() const { return flow == FlowSource::none ? 3 : 7; }

  void validate() const {
    require_seed();
    backbone.validate();
    weights.validate();
    openmax.validate();
    groups.validate();
    flow_config.validate();
    if (!joint) stage1.validate();
    if (meta_embedding || joint) stage2.validate();
    if (joint && !meta_embedding) throw ConfigError("joint training needs the meta-embedding head");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
    if (backbone.input_channels != expected_input_channels()) {
      throw ConfigError("backbone input_channels is " + std::to_string(backbone.input_channels) + " but flow source '" +
                        flow_source_name(flow) + "' yields " + std::to_string(expected_input_channels()));
    }
    if (!(cosine_scale > 0)) throw ConfigError("cosine_scale must be positive");
  }
};

namespace detail {

inline json to_json(const SgdConfig& s) {
  return {{"lr", s.learning_rate}, {"weight_decay", s.weight_decay}, {"momentum", s.momentum}, {"epochs", s.epochs}};
}

inline SgdConfig sgd_from_json(const json& j, SgdConfig s) {
  for (const auto& [key, value] : j.items()) {
    if (key == "lr") s.learning_rate = value.get<double>();
    else if (key == "weight_decay") s.weight_decay = value.get<double>();
    else if (key == "momentum") s.momentum = value.get<double>();
    else if (key == "epochs") s.epochs = value.get<int>();
    else throw ConfigError("unknown optimizer key '" + key + "'");
  }
  return s;
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  json j{{"dataset", c.dataset},
         {"out", c.out_dir},
         {"backbone", tfma::to_json(c.backbone)},
         {"stage1", detail::to_json(c.stage1)},
         {"stage2", detail::to_json(c.stage2)},
         {"loss",
          {{"lambda1", c.weights.lambda1},
           {"lambda2", c.weights.lambda2},
           {"margin", c.weights.margin},
           {"squared_distance", c.weights.squared_distance},
           {"ce_form", c.weights.ce_form == losses::CeForm::softmax ? "softmax" : "binary_per_class"}}},
         {"openmax", {{"tail_size", c.openmax.tail_size}, {"alpha", c.openmax.alpha}}},
         {"groups", {{"many_min", c.groups.many_min}, {"medium_min", c.groups.medium_min}}},
         {"flow", flow_source_name(c.flow)},
         {"augment", c.augment},
         {"meta_embedding", c.meta_embedding},
         {"joint", c.joint},
         {"cosine_lr", c.cosine_lr},
         {"batch_size", c.batch_size},
         {"cosine_scale", c.cosine_scale},
         {"softmax_memory", c.softmax_memory}};
  j["seed"] = c.seed ? json(*c.seed) : json(nullptr);
  return j;
}

/// Overlays the keys of `j` on `base`. Unknown keys are rejected.
inline RunConfig run_config_from_json(const json& j, RunConfig c = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "dataset") c.dataset = value.get<std::string>();
      else if (key == "out") c.out_dir = value.get<std::string>();
      else if (key == "seed") c.seed = value.is_null() ? std::nullopt : std::optional(value.get<std::uint64_t>());
      else if (key == "backbone") c.backbone = backbone_from_json(value, c.backbone);
      else if (key == "stage1") c.stage1 = detail::sgd_from_json(value, c.stage1);
      else if (key == "stage2") c.stage2 = detail::sgd_from_json(value, c.stage2);
      else if (key == "loss") {
        for (const auto& [k, v] : value.items()) {
          if (k == "lambda1") c.weights.lambda1 = v.get<double>();
          else if (k == "lambda2") c.weights.lambda2 = v.get<double>();
          else if (k == "margin") c.weights.margin = v.get<double>();
          else if (k == "squared_distance") c.weights.squared_distance = v.get<bool>();
          else if (k == "ce_form") {
            const auto form = v.get<std::string>();
            if (form == "softmax") c.weights.ce_form = losses::CeForm::softmax;
            else if (form == "binary_per_class") c.weights.ce_form = losses::CeForm::binary_per_class;
            else throw ConfigError("ce_form must be softmax or binary_per_class");
          } else throw ConfigError("unknown loss key '" + k + "'");
        }
      } else if (key == "openmax") {
        for (const auto& [k, v] : value.items()) {
          if (k == "tail_size") c.openmax.tail_size = v.get<std::size_t>();
          else if (k == "alpha") c.openmax.alpha = v.get<std::size_t>();
          else throw ConfigError("unknown openmax key '" + k + "'");
        }
      } else if (key == "groups") {
        for (const auto& [k, v] : value.items()) {
          if (k == "many_min") c.groups.many_min = v.get<std::size_t>();
          else if (k == "medium_min") c.groups.medium_min = v.get<std::size_t>();
          else throw ConfigError("unknown groups key '" + k + "'");
        }
      } else if (key == "flow") c.flow = flow_source_from_name(value.get<std::string>());
      else if (key == "augment") c.augment = value.get<bool>();
      else if (key == "meta_embedding") c.meta_embedding = value.get<bool>();
      else if (key == "joint") c.joint = value.get<bool>();
      else if (key == "cosine_lr") c.cosine_lr = value.get<bool>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "cosine_scale") c.cosine_scale = value.get<double>();
      else if (key == "softmax_memory") c.softmax_memory = value.get<bool>();
      else if (key == "data") continue;  // generator settings, read by synth_config_from_json
      else throw ConfigError("unknown config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return c;
}

/// Generator settings from the optional "data" section, overlaid on the defaults.
inline synthdata::SynthConfig synth_config_from_json(const json& j) {
  json merged = synthdata::to_json(synthdata::SynthConfig{});
  if (j.is_object() && j.contains("data")) {
    const json& d = j.at("data");
    if (!d.is_object()) throw ConfigError("\"data\" must be an object");
    for (const auto& [key, value] : d.items())
      if (!merged.contains(key)) throw ConfigError("unknown data key '" + key + "'");
    merged.merge_patch(d);
  }
  try {
    synthdata::SynthConfig c = synthdata::config_from_json(merged);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad data value: ") + e.what());
  }
}

inline json read_config_json(const std::string& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse config " + path + ": " + e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
}

inline RunConfig read_run_config(const std::string& path, RunConfig base = {}) {
  return run_config_from_json(read_config_json(path), std::move(base));
}

/// RGB-only baseline: no flow channels, no masks.
inline RunConfig baseline_config(RunConfig c) {
  c.flow = FlowSource::none;
  c.backbone.input_channels = 3;
  c.backbone.set_masks(false);
  c.meta_embedding = false;
  return c;
}

// ---------------------------------------------------------------------------
// Data

/// Network inputs for every sample of a manifest.
struct Dataset {
  synthdata::DatasetManifest manifest;
  std::vector<Tensor> inputs;  // [C, H, W] per sample
  std::size_t image_channels = 3;

  std::size_t channels() const { return inputs.front().dim(0); }
  std::size_t size() const { return inputs.size(); }
  std::vector<int> labels(const std::vector<std::size_t>& idx) const {
    std::vector<int> y;
    for (std::size_t i : idx) y.push_back(manifest.samples[i].label);
    return y;
  }
};

/// Builds concat(frame_0, OF_1, OF_2) per sample, or frame_0 alone when flow
/// is disabled. Estimated flow is cached next to each sample.
inline Dataset load_dataset(const std::string& root, FlowSource source, const flow::FlowConfig& flow_cfg = {},
                            const std::function<void(std::size_t, std::size_t)>& progress = {}) {
  Dataset d;
  d.manifest = synthdata::read_manifest(root);
  const auto& cfg = d.manifest.config;
  const double max_disp = cfg.max_displacement;
  flow::FlowConfig fc = flow_cfg;
  fc.max_displacement = max_disp;
  for (std::size_t i = 0; i < d.manifest.samples.size(); ++i) {
    const auto& r = d.manifest.samples[i];
    const auto frames = synthdata::read_frames(root, r);
    const Tensor t0 = image_to_tensor(frames[0]);
    switch (source) {
      case FlowSource::none: d.inputs.push_back(t0); break;
      case FlowSource::ground_truth:
        d.inputs.push_back(flow::build_input(t0, flow::ground_truth_flow(r, 1, cfg.image_size),
                                             flow::ground_truth_flow(r, 2, cfg.image_size), max_disp));
        break;
      case FlowSource::estimated: {
        const std::string dir = (std::filesystem::path(root) / r.path).string();
        d.inputs.push_back(flow::build_input(t0, flow::cached_flow(dir, 1, frames[0], frames[1], fc),
                                             flow::cached_flow(dir, 2, frames[1], frames[2], fc), max_disp));
        break;
      }
    }
    if (progress) progress(i + 1, d.manifest.samples.size());
  }
  return d;
}

/// Stacks samples into [B, C, H, W], mirroring those with flip[i] set.
inline Tensor make_batch(const Dataset& d, const std::vector<std::size_t>& idx, const std::vector<bool>& flip = {}) {
  const Tensor& first = d.inputs.at(idx.front());
  const std::size_t per = first.numel();
  Shape shape{idx.size()};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Tensor x(shape);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Tensor src = !flip.empty() && flip[b] ? flow::hflip_input(d.inputs[idx[b]], d.image_channels) : d.inputs[idx[b]];
    std::copy(src.data().begin(), src.data().end(), x.data().begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return x;
}

/// Training indices; refuses any unknown-class sample.
inline std::vector<std::size_t> training_indices(const synthdata::DatasetManifest& m) {
  auto idx = m.indices(synthdata::Split::train, true);
  for (std::size_t i : idx)
    if (m.samples[i].is_unknown) throw DataError("unknown-class sample reached the training loader: " + m.samples[i].path);
  return idx;
}

/// Splits n items into ceil(n / size) batches whose sizes differ by at most one.
inline std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t size) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (n == 0) return out;
  const std::size_t count = (n + size - 1) / size;
  std::size_t begin = 0;
  for (std::size_t b = 0; b < count; ++b) {
    const std::size_t len = n / count + (b < n % count ? 1 : 0);
    out.emplace_back(begin, begin + len);
    begin += len;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  int stage = 1;
  int epoch = 0;
  double lr = 0;
  double ce = 0;
  double margin = 0;
  double regularizer = 0;
  double total = 0;
  std::vector<double> occupancy;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::string stage1_checkpoint;
  std::string stage2_checkpoint;
};

inline double scheduled_lr(const SgdConfig& s, int epoch, bool cosine) {
  if (!cosine) return s.learning_rate;
  return 0.5 * s.learning_rate * (1.0 + std::cos(std::numbers::pi * epoch / s.epochs));
}

/// Features of the given samples in eval mode, [S, D].
inline Tensor extract_features(Model& model, const Dataset& d, const std::vector<std::size_t>& idx,
                               std::size_t batch_size) {
  NoGradScope no_grad;
  const std::size_t dim = model.config().backbone.feature_dim();
  Tensor out(Shape{idx.size(), dim});
  for (auto [b, e] : batch_ranges(idx.size(), batch_size)) {
    const std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(b), idx.begin() + static_cast<std::ptrdiff_t>(e));
    const Tensor f = model.net().forward(make_batch(d, chunk), Mode::eval);
    std::copy(f.data().begin(), f.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * dim));
  }
  return out;
}

namespace detail {

inline std::string parameter_norms(const std::vector<Tensor>& params) {
  std::ostringstream os;
  for (std::size_t i = 0; i < params.size(); ++i) {
    double s = 0;
    for (double v : params[i].data()) s += v * v;
    os << (i ? ", " : "") << "p" << i << "=" << std::sqrt(s);
  }
  return os.str();
}

}  // namespace detail

/// One stage of SGD over the training split.
inline void run_stage(Model& model, const Dataset& data, const RunConfig& cfg, int stage, const SgdConfig& sgd,
                      std::vector<EpochLog>& log, const std::function<void(const EpochLog&)>& on_epoch) {
  const std::uint64_t seed = cfg.require_seed();
  const auto train_idx = training_indices(data.manifest);
  if (train_idx.empty()) throw DataError("training split is empty");
  SgdState state;
  std::vector<Tensor> params = model.parameters();
  for (int epoch = 0; epoch < sgd.epochs; ++epoch) {
    const double lr = scheduled_lr(sgd, epoch, cfg.cosine_lr);
    std::vector<std::size_t> order = train_idx;
    Rng order_rng(derive_seed(seed, 0x100 + static_cast<std::uint64_t>(stage), static_cast<std::uint64_t>(epoch)));
    order_rng.shuffle(std::span<std::size_t>(order));
    Rng aug_rng(derive_seed(seed, 0x200 + static_cast<std::uint64_t>(stage), static_cast<std::uint64_t>(epoch)));
    model.net().reset_occupancy();
    EpochLog entry{stage, epoch, lr};
    std::size_t seen = 0;
    for (auto [b, e] : batch_ranges(order.size(), cfg.batch_size)) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b), order.begin() + static_cast<std::ptrdiff_t>(e));
      std::vector<bool> flip(idx.size(), false);
      if (cfg.augment)
        for (std::size_t k = 0; k < idx.size(); ++k) flip[k] = aug_rng.bernoulli(0.5);
      const Tensor x = make_batch(data, idx, flip);
      const std::vector<int> y = data.labels(idx);

      Tape tape;
      TapeScope scope(tape);
      const ForwardResult fwd = model.forward(x, Mode::train);
      Tensor ce, margin;
      if (model.has_meta()) {
        ce = losses::cross_entropy(softmax_last(fwd.logits), y, cfg.weights.ce_form);
        margin = losses::margin_loss(fwd.meta.meta, model.centroids(), y, cfg.weights.margin, cfg.weights.squared_distance);
      } else {
        ce = losses::softmax_cross_entropy(fwd.logits, y);
        margin = Tensor(ce.shape());
      }
      const Tensor reg = maskattn::threshold_regularizer(model.net().thresholds());
      Tensor total = losses::total_loss(ce, margin, reg, cfg.weights, losses::Reduction::mean);
      if (!total.all_finite()) {
        throw NumericalError("non-finite loss at stage " + std::to_string(stage) + ", epoch " + std::to_string(epoch) +
                             ", batch starting at " + std::to_string(b) + "; parameter norms: " +
                             detail::parameter_norms(params));
      }
      tape.backward(total);
      sgd_step(params, state, sgd, lr);

      const double n = static_cast<double>(idx.size());
      double ce_sum = 0, margin_sum = 0;
      for (double v : ce.data()) ce_sum += v;
      for (double v : margin.data()) margin_sum += v;
      entry.ce += ce_sum;
      entry.margin += margin_sum;
      entry.regularizer += reg.item() * n;
      entry.total += total.item() * n;
      seen += idx.size();
    }
    const double n = static_cast<double>(seen);
    entry.ce /= n;
    entry.margin /= n;
    entry.regularizer /= n;
    entry.total /= n;
    entry.occupancy = model.net().occupancy();
    log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
}

/// Attaches the meta-embedding head with centroids of the current training
/// features.
inline void attach_meta_head(Model& model, const Dataset& data, const RunConfig& cfg) {
  const auto idx = training_indices(data.manifest);
  const Tensor features = extract_features(model, data, idx, cfg.batch_size);
  const auto centroids = metaembed::compute_centroids(features, data.labels(idx), model.config().num_classes);
  Rng rng(derive_seed(cfg.require_seed(), 0x300));
  model.attach_meta(centroids, rng);
}

inline ModelConfig model_config(const RunConfig& cfg, std::size_t num_classes) {
  return {cfg.backbone, num_classes, cfg.cosine_scale, cfg.softmax_memory};
}

inline void write_logs(const std::string& dir, const std::vector<EpochLog>& log) {
  std::ostringstream loss, occ;
  loss << "stage,epoch,lr,ce,margin,regularizer,total\n";
  occ << "stage,epoch,layer,occupancy\n";
  loss.precision(10);
  occ.precision(10);
  for (const auto& e : log) {
    loss << e.stage << ',' << e.epoch << ',' << e.lr << ',' << e.ce << ',' << e.margin << ',' << e.regularizer << ','
         << e.total << '\n';
    for (std::size_t l = 0; l < e.occupancy.size(); ++l)
      occ << e.stage << ',' << e.epoch << ',' << l << ',' << e.occupancy[l] << '\n';
  }
  write_file((std::filesystem::path(dir) / "loss_log.csv").string(), loss.str());
  write_file((std::filesystem::path(dir) / "occupancy.csv").string(), occ.str());
}

/// Two-stage training: representation learning with a linear classifier, then
/// meta-embedding fine-tuning. Writes stage checkpoints and logs to out_dir.
inline TrainResult train(const RunConfig& cfg, const Dataset& data,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (data.channels() != cfg.backbone.input_channels) {
    throw ConfigError("dataset inputs have " + std::to_string(data.channels()) + " channels, backbone expects " +
                      std::to_string(cfg.backbone.input_channels));
  }
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw DataError("cannot create output directory " + cfg.out_dir + ": " + ec.message());
  write_file((fs::path(cfg.out_dir) / "run_config.json").string(), to_json(cfg).dump(2) + "\n");

  Rng init_rng(derive_seed(cfg.require_seed(), 0x1));
  Model model(model_config(cfg, data.manifest.closed_classes()), init_rng);
  TrainResult result;
  if (!cfg.joint) {
    run_stage(model, data, cfg, 1, cfg.stage1, result.log, on_epoch);
    result.stage1_checkpoint = (fs::path(cfg.out_dir) / "stage1.ckpt").string();
    save_model(result.stage1_checkpoint, model, 1);
  }
  if (cfg.meta_embedding) {
    attach_meta_head(model, data, cfg);
    run_stage(model, data, cfg, 2, cfg.stage2, result.log, on_epoch);
    result.stage2_checkpoint = (fs::path(cfg.out_dir) / "stage2.ckpt").string();
    save_model(result.stage2_checkpoint, model, 2);
  }
  write_logs(cfg.out_dir, result.log);
  return result;
}

}  // namespace tfma::train
