#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "tfma/backbone.hpp"
#include "tfma/checkpoint.hpp"
#include "tfma/image.hpp"
#include "tfma/losses.hpp"
#include "tfma/metaembed.hpp"

namespace tfma {

struct ModelConfig {
  backbone::BackboneConfig backbone;
  std::size_t num_classes = 11;
  double cosine_scale = 16.0;
  bool softmax_memory = true;
};

inline nlohmann::json to_json(const backbone::BackboneConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.stages) stages.push_back({{"blocks", s.blocks}, {"channels", s.channels}, {"mask", s.mask_enabled}});
  return {{"input_channels", c.input_channels},
          {"stem_channels", c.stem_channels},
          {"stem_stride", c.stem_stride},
          {"init_threshold", c.init_threshold},
          {"stages", stages}};
}

inline backbone::BackboneConfig backbone_from_json(const nlohmann::json& j, backbone::BackboneConfig c = {}) {
  for (const auto& [key, value] : j.items()) {
    if (key == "input_channels") c.input_channels = value.get<std::size_t>();
    else if (key == "stem_channels") c.stem_channels = value.get<std::size_t>();
    else if (key == "stem_stride") c.stem_stride = value.get<std::size_t>();
    else if (key == "init_threshold") c.init_threshold = value.get<double>();
    else if (key == "masks") c.set_masks(value.get<bool>());
    else if (key == "stages") {
      c.stages.clear();
      for (const auto& s : value)
        c.stages.push_back({s.at("blocks").get<std::size_t>(), s.at("channels").get<std::size_t>(), s.value("mask", true)});
    } else {
      throw ConfigError("unknown backbone key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"backbone", to_json(c.backbone)},
          {"num_classes", c.num_classes},
          {"cosine_scale", c.cosine_scale},
          {"softmax_memory", c.softmax_memory}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.backbone = backbone_from_json(j.at("backbone"));
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.cosine_scale = j.at("cosine_scale").get<double>();
  c.softmax_memory = j.at("softmax_memory").get<bool>();
  return c;
}

struct ForwardResult {
  Tensor features;  // [B, D]
  Tensor logits;    // [B, N]
  metaembed::MetaOutput meta;  // set once the meta-embedding head is attached
};

/// Backbone with a linear classifier (representation stage) or the
/// meta-embedding head with a cosine classifier (fine-tuning stage).
class Model {
 public:
  Model(const ModelConfig& cfg, Rng& rng)
      : config_(cfg),
        net_(cfg.backbone, rng),
        linear_(metaembed::Affine::init(cfg.backbone.feature_dim(), cfg.num_classes, rng)) {
    if (cfg.num_classes < 2) throw ConfigError("need at least 2 classes");
  }

  const ModelConfig& config() const { return config_; }
  backbone::Backbone& net() { return net_; }
  metaembed::Affine& linear() { return linear_; }
  bool has_meta() const { return has_meta_; }
  const metaembed::Centroids& centroids() const { return centroids_; }
  metaembed::MetaState& meta() { return meta_; }

  /// Freezes `centroids` and attaches a fresh meta-embedding head whose
  /// cosine weights start at the centroids.
  void attach_meta(const metaembed::Centroids& centroids, Rng& rng) {
    const std::size_t d = config_.backbone.feature_dim(), n = config_.num_classes;
    if (centroids.matrix.shape() != Shape{n, d}) throw ShapeError("centroids do not match the model");
    centroids_ = {centroids.matrix.detach()};
    meta_ = metaembed::MetaState::init(d, n, rng);
    meta_.scale = config_.cosine_scale;
    meta_.softmax_memory = config_.softmax_memory;
    std::copy(centroids.matrix.data().begin(), centroids.matrix.data().end(), meta_.cosine_weight.data().begin());
    has_meta_ = true;
  }

  ForwardResult forward(const Tensor& x, Mode mode) {
    ForwardResult r;
    r.features = net_.forward(x, mode);
    if (has_meta_) {
      r.meta = metaembed::meta_embed(r.features, centroids_, meta_);
      r.logits = losses::cosine_logits(r.meta.meta, meta_.cosine_weight, meta_.scale);
    } else {
      r.logits = linear_(r.features);
    }
    return r;
  }

  /// Trainable tensors of the current stage.
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> p;
    net_.parameters(p);
    if (has_meta_) meta_.parameters(p);
    else linear_.parameters(p);
    return p;
  }

  std::vector<NamedTensor> export_state() const {
    std::vector<NamedTensor> out;
    net_.export_state("backbone", out);
    linear_.export_state("linear", out);
    if (has_meta_) {
      out.push_back({"meta.centroids", centroids_.matrix});
      meta_.hallucinator.export_state("meta.hallucinator", out);
      meta_.selector.export_state("meta.selector", out);
      out.push_back({"meta.cosine_weight", meta_.cosine_weight});
    }
    return out;
  }

  void import_state(const std::vector<NamedTensor>& tensors, bool with_meta) {
    const StateMap state = to_state_map(tensors);
    net_.import_state("backbone", state);
    linear_.import_state("linear", state);
    has_meta_ = false;
    if (!with_meta) return;
    Rng unused(0);
    const std::size_t d = config_.backbone.feature_dim(), n = config_.num_classes;
    centroids_ = {Tensor(Shape{n, d})};
    restore_into(centroids_.matrix, state, "meta.centroids");
    meta_ = metaembed::MetaState::init(d, n, unused);
    meta_.scale = config_.cosine_scale;
    meta_.softmax_memory = config_.softmax_memory;
    meta_.hallucinator.import_state("meta.hallucinator", state);
    meta_.selector.import_state("meta.selector", state);
    restore_into(meta_.cosine_weight, state, "meta.cosine_weight");
    has_meta_ = true;
  }

 private:
  ModelConfig config_;
  backbone::Backbone net_;
  metaembed::Affine linear_;
  bool has_meta_ = false;
  metaembed::Centroids centroids_;
  metaembed::MetaState meta_;
};

/// Checkpoint tensors plus a JSON sidecar (`<path>.json`) describing the
/// architecture and stage.
inline void save_model(const std::string& path, const Model& model, int stage) {
  save_checkpoint(path, model.export_state());
  const nlohmann::json meta{{"model", to_json(model.config())}, {"stage", stage}, {"meta_embedding", model.has_meta()}};
  write_file(path + ".json", meta.dump(2) + "\n");
}

struct LoadedModel {
  Model model;
  int stage;
};

inline LoadedModel load_model(const std::string& path) {
  nlohmann::json meta;
  ModelConfig cfg;
  int stage = 0;
  bool with_meta = false;
  try {
    meta = nlohmann::json::parse(read_file(path + ".json"));
    cfg = model_config_from_json(meta.at("model"));
    stage = meta.at("stage").get<int>();
    with_meta = meta.at("meta_embedding").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint description " + path + ".json: " + e.what());
  }
  Rng rng(0);
  LoadedModel out{Model(cfg, rng), stage};
  out.model.import_state(load_checkpoint(path), with_meta);
  return out;
}

inline std::string file_hash(const std::string& path) { return hex64(fnv1a(read_file(path))); }

}  // namespace tfma
