#pragma once

#include <span>
#include <string>
#include <vector>

#include "tfma/metaembed.hpp"
#include "tfma/ops.hpp"

namespace tfma::losses {

/// How the class-probability vector is scored against a one-hot label.
enum class CeForm {
  binary_per_class,  // -sum_j [y_j log p_j + (1 - y_j) log(1 - p_j)]
  softmax,           // -log p_y
};

enum class Reduction { sum, mean };

struct LossWeights {
  double lambda1 = 0.1;
  double lambda2 = 5e-6;
  double margin = 10.0;
  bool squared_distance = false;
  CeForm ce_form = CeForm::binary_per_class;

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0 || margin < 0) throw ConfigError("loss weights and margin must be nonnegative");
  }
};

inline constexpr double kProbabilityClamp = 1e-12;

inline Tensor one_hot(std::span<const int> labels, std::size_t num_classes) {
  Tensor t(Shape{labels.size(), num_classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) throw DataError("label out of range");
    t[i * num_classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return t;
}

/// s * cos(v, w_j) for every row of v [B, D] and class weight w_j (rows of
/// `weights` [N, D]).
inline Tensor cosine_logits(const Tensor& v, const Tensor& weights, double scale) {
  return mul_scalar(matmul(row_normalize(v), transpose(row_normalize(weights))), scale);
}

/// Softmax over scaled cosine similarities: a probability vector per row.
inline Tensor cosine_scores(const Tensor& v, const Tensor& weights, double scale) {
  return softmax_last(cosine_logits(v, weights, scale));
}

/// Per-sample cross-entropy of probability rows `scores` [B, N]; returns [B].
inline Tensor cross_entropy(const Tensor& scores, std::span<const int> labels, CeForm form = CeForm::binary_per_class) {
  if (scores.rank() != 2 || scores.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy expects [B, N] scores and B labels");
  }
  const Tensor y = one_hot(labels, scores.dim(1));
  const Tensor p = clamp(scores, kProbabilityClamp, 1.0 - kProbabilityClamp);
  Tensor likelihood = mul(y, log(p));
  if (form == CeForm::binary_per_class) {
    Tensor not_y(y.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) not_y[i] = 1.0 - y[i];
    likelihood = add(likelihood, mul(not_y, log(add_scalar(neg(p), 1.0))));
  }
  return neg(sum_last(likelihood));
}

/// Plain softmax cross-entropy on unnormalized logits; returns [B].
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  return cross_entropy(softmax_last(logits), labels, CeForm::softmax);
}

/// ReLU(||v - c_y|| - sum_{j != y} ||v - c_j|| + m) per row of v [B, D].
inline Tensor margin_loss(const Tensor& v_meta, const metaembed::Centroids& centroids, std::span<const int> labels,
                          double margin, bool squared_distance = false) {
  const Tensor v = v_meta.rank() == 1 ? reshape(v_meta, Shape{1, v_meta.numel()}) : v_meta;
  if (v.dim(0) != labels.size()) throw ShapeError("margin_loss expects one label per row");
  Tensor signs = one_hot(labels, centroids.classes());
  for (double& s : signs.data()) s = s > 0 ? 1.0 : -1.0;
  Tensor dist = pairwise_distance(v, centroids.matrix, squared_distance);
  return relu(add_scalar(sum_last(mul(dist, signs)), margin));
}

/// sum_i (CE_i + lambda1 * M_i) + lambda2 * R, with R added once per batch.
/// Reduction::mean averages the per-sample part instead of summing it.
inline Tensor total_loss(const Tensor& ce, const Tensor& margin, const Tensor& regularizer, const LossWeights& w,
                         Reduction reduction = Reduction::sum) {
  if (ce.shape() != margin.shape()) throw ShapeError("CE and margin terms must have one entry per sample");
  Tensor per_sample = sum(add(ce, mul_scalar(margin, w.lambda1)));
  if (reduction == Reduction::mean) per_sample = mul_scalar(per_sample, 1.0 / static_cast<double>(ce.numel()));
  return add(per_sample, mul_scalar(regularizer, w.lambda2));
}

}  // namespace tfma::losses
