#pragma once

#include <span>
#include <string>
#include <vector>

#include "tfma/maskattn.hpp"
#include "tfma/ops.hpp"
#include "tfma/rng.hpp"

namespace tfma::metaembed {

inline constexpr double kReachabilityFloor = 1e-6;

/// One centroid per known class, stored as the rows of an [N, D] matrix.
/// Centroids are constants: they never receive gradients.
struct Centroids {
  Tensor matrix;

  std::size_t classes() const { return matrix.dim(0); }
  std::size_t dim() const { return matrix.dim(1); }
};

/// Per-class mean of the rows of `features` [S, D].
inline Centroids compute_centroids(const Tensor& features, std::span<const int> labels, std::size_t num_classes) {
  if (features.rank() != 2 || features.dim(0) != labels.size()) {
    throw ShapeError("compute_centroids expects [S, D] features with one label per row");
  }
  const std::size_t d = features.dim(1);
  std::vector<double> sums(num_classes * d, 0.0);
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t s = 0; s < labels.size(); ++s) {
    const int y = labels[s];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw DataError("label out of range in centroid pass");
    ++counts[y];
    for (std::size_t k = 0; k < d; ++k) sums[y * d + k] += features[s * d + k];
  }
  for (std::size_t j = 0; j < num_classes; ++j) {
    if (counts[j] == 0) throw DataError("class " + std::to_string(j) + " has no samples for its centroid");
    for (std::size_t k = 0; k < d; ++k) sums[j * d + k] /= static_cast<double>(counts[j]);
  }
  return {Tensor(Shape{num_classes, d}, std::move(sums))};
}

/// Fully connected layer y = x W + b, W stored [in, out].
struct Affine {
  Tensor weight;
  Tensor bias;

  static Affine init(std::size_t in, std::size_t out, Rng& rng, double scale = 1.0) {
    Affine a{Tensor(Shape{in, out}, 0.0, true), Tensor(Shape{out}, 0.0, true)};
    const double sd = scale / std::sqrt(static_cast<double>(in));
    for (double& v : a.weight.data()) v = rng.normal(0.0, sd);
    return a;
  }

  Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }

  void parameters(std::vector<Tensor>& out) const {
    out.push_back(weight);
    out.push_back(bias);
  }
  void export_state(const std::string& prefix, std::vector<NamedTensor>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
  void import_state(const std::string& prefix, const StateMap& state) {
    restore_into(weight, state, prefix + ".weight");
    restore_into(bias, state, prefix + ".bias");
  }
};

/// Hallucinator (D -> N), concept selector (D -> D) and cosine classifier
/// weights (N rows of dimension D) with scale s.
struct MetaState {
  Affine hallucinator;
  Affine selector;
  Tensor cosine_weight;
  double scale = 16.0;
  bool softmax_memory = true;

  static MetaState init(std::size_t feature_dim, std::size_t num_classes, Rng& rng) {
    MetaState s;
    s.hallucinator = Affine::init(feature_dim, num_classes, rng, 0.1);
    s.selector = Affine::init(feature_dim, feature_dim, rng, 0.1);
    s.cosine_weight = Tensor(Shape{num_classes, feature_dim}, 0.0, true);
    for (double& v : s.cosine_weight.data()) v = rng.normal(0.0, 1.0);
    return s;
  }

  void validate(std::size_t feature_dim, std::size_t num_classes) const {
    if (hallucinator.weight.shape() != Shape{feature_dim, num_classes} ||
        selector.weight.shape() != Shape{feature_dim, feature_dim} ||
        cosine_weight.shape() != Shape{num_classes, feature_dim}) {
      throw ShapeError("meta-embedding state dimensions inconsistent with D=" + std::to_string(feature_dim) +
                       ", N=" + std::to_string(num_classes));
    }
    if (!(scale > 0.0)) throw ConfigError("cosine scale must be positive");
  }

  void parameters(std::vector<Tensor>& out) const {
    hallucinator.parameters(out);
    selector.parameters(out);
    out.push_back(cosine_weight);
  }
};

namespace detail {
inline Tensor as_rows(const Tensor& v) { return v.rank() == 1 ? reshape(v, Shape{1, v.numel()}) : v; }
}  // namespace detail

/// Hallucinator coefficients: softmax(F_H(v)) by default, raw F_H(v) when
/// `softmax` is off.
inline Tensor memory_coefficients(const Tensor& v_feature, const Affine& hallucinator, bool softmax = true) {
  Tensor logits = hallucinator(detail::as_rows(v_feature));
  return softmax ? softmax_last(logits) : logits;
}

/// v_memory = sum_j coeff_j c_j.
inline Tensor memory_vector(const Tensor& v_feature, const Centroids& centroids, const Affine& hallucinator,
                            bool softmax = true) {
  return matmul(memory_coefficients(v_feature, hallucinator, softmax), centroids.matrix);
}

/// v_selector = tanh(F_CS(v)).
inline Tensor selector_vector(const Tensor& v_feature, const Affine& selector) {
  return tfma::tanh(selector(detail::as_rows(v_feature)));
}

/// gamma = max(min_j ||v - c_j||, 1e-6), one value per row.
inline Tensor reachability(const Tensor& v_feature, const Centroids& centroids) {
  return floor_at(min_last(pairwise_distance(detail::as_rows(v_feature), centroids.matrix)), kReachabilityFloor);
}

struct MetaOutput {
  Tensor meta;
  Tensor memory;
  Tensor selector;
  Tensor gamma;
};

/// v_meta = (v_feature + v_selector * v_memory) / gamma.
inline MetaOutput meta_embed(const Tensor& v_feature, const Centroids& centroids, const MetaState& state) {
  Tensor v = detail::as_rows(v_feature);
  MetaOutput out;
  out.memory = memory_vector(v, centroids, state.hallucinator, state.softmax_memory);
  out.selector = selector_vector(v, state.selector);
  out.gamma = reachability(v, centroids);
  out.meta = scale_rows(add(v, mul(out.selector, out.memory)), reciprocal(out.gamma));
  return out;
}

}  // namespace tfma::metaembed
