#pragma once

#include <array>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tfma/openset.hpp"
#include "tfma/train.hpp"

namespace tfma::eval {

using nlohmann::json;
using synthdata::Group;

struct Predictions {
  std::vector<std::size_t> indices;
  std::vector<int> labels;
  std::vector<int> predicted;
  std::vector<std::vector<double>> logits;
  Tensor features;            // [S, D]
  Tensor meta;                // [S, D], meta-embedding checkpoints only
  std::vector<double> gamma;  // meta-embedding checkpoints only
};

inline int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Eval-mode forward pass over the given samples.
inline Predictions predict(Model& model, const train::Dataset& d, const std::vector<std::size_t>& idx,
                           std::size_t batch_size = 64) {
  NoGradScope no_grad;
  Predictions p;
  p.indices = idx;
  p.labels = d.labels(idx);
  const std::size_t dim = model.config().backbone.feature_dim();
  p.features = Tensor(Shape{idx.size(), dim});
  if (model.has_meta()) p.meta = Tensor(Shape{idx.size(), dim});
  for (auto [b, e] : train::batch_ranges(idx.size(), batch_size)) {
    const std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(b), idx.begin() + static_cast<std::ptrdiff_t>(e));
    const ForwardResult r = model.forward(train::make_batch(d, chunk), Mode::eval);
    const std::size_t n = r.logits.dim(1);
    for (std::size_t k = 0; k < chunk.size(); ++k) {
      std::vector<double> row(r.logits.data().begin() + static_cast<std::ptrdiff_t>(k * n),
                              r.logits.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * n));
      p.predicted.push_back(argmax(row));
      p.logits.push_back(std::move(row));
      if (model.has_meta()) p.gamma.push_back(r.meta.gamma[k]);
    }
    std::copy(r.features.data().begin(), r.features.data().end(), p.features.data().begin() + static_cast<std::ptrdiff_t>(b * dim));
    if (model.has_meta())
      std::copy(r.meta.meta.data().begin(), r.meta.meta.data().end(), p.meta.data().begin() + static_cast<std::ptrdiff_t>(b * dim));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Closed set

struct ClosedMetrics {
  double top1 = 0;
  std::array<std::optional<double>, 3> group_acc;  // many, medium, few; empty when the group has no test samples
  std::vector<Group> class_group;
  std::vector<double> class_acc;  // NaN for classes without test samples
  std::size_t samples = 0;
};

/// Top-1 overall and per group, with groups assigned from training counts.
inline ClosedMetrics closed_metrics(std::span<const int> labels, std::span<const int> predicted,
                                    const std::vector<std::size_t>& train_counts, const synthdata::GroupThresholds& t) {
  if (labels.size() != predicted.size()) throw ShapeError("labels and predictions differ in length");
  if (labels.empty()) throw DataError("closed-set evaluation needs test samples");
  ClosedMetrics m;
  m.samples = labels.size();
  const std::size_t n = train_counts.size();
  for (std::size_t c = 0; c < n; ++c) m.class_group.push_back(synthdata::group_of(train_counts[c], t));
  std::vector<double> hit(n, 0), total(n, 0);
  std::array<double, 3> ghit{}, gtotal{};
  double correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    if (c >= n) throw DataError("label outside the closed set in closed-set evaluation");
    const double ok = predicted[i] == labels[i] ? 1.0 : 0.0;
    correct += ok;
    hit[c] += ok;
    total[c] += 1;
    const auto g = static_cast<std::size_t>(m.class_group[c]);
    ghit[g] += ok;
    gtotal[g] += 1;
  }
  m.top1 = correct / static_cast<double>(labels.size());
  for (std::size_t g = 0; g < 3; ++g)
    if (gtotal[g] > 0) m.group_acc[g] = ghit[g] / gtotal[g];
  for (std::size_t c = 0; c < n; ++c) m.class_acc.push_back(total[c] > 0 ? hit[c] / total[c] : std::nan(""));
  return m;
}

inline ClosedMetrics evaluate_closed(Model& model, const train::Dataset& d, const synthdata::GroupThresholds& t,
                                     std::size_t batch_size = 64) {
  const auto idx = d.manifest.indices(synthdata::Split::test, false);
  const Predictions p = predict(model, d, idx, batch_size);
  auto counts = d.manifest.train_counts();
  counts.resize(d.manifest.closed_classes());
  return closed_metrics(p.labels, p.predicted, counts, t);
}

// ---------------------------------------------------------------------------
// Open set

struct OpenMetrics {
  double auroc_imbalanced = 0;
  double auroc_balanced = 0;
  openset::RocCurve roc_imbalanced;
  openset::RocCurve roc_balanced;
  std::size_t imbalanced_samples = 0;
  std::size_t balanced_samples = 0;
  std::vector<std::string> warnings;
};

/// AUROC of unknown scores over all test samples and over the balanced subset.
inline OpenMetrics open_metrics(std::span<const double> scores, const std::vector<bool>& is_unknown,
                                const std::vector<bool>& balanced) {
  OpenMetrics m;
  m.roc_imbalanced = openset::roc_auroc(scores, is_unknown);
  m.auroc_imbalanced = m.roc_imbalanced.auroc;
  m.imbalanced_samples = scores.size();
  std::vector<double> bs;
  std::vector<bool> bu;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (balanced[i]) {
      bs.push_back(scores[i]);
      bu.push_back(is_unknown[i]);
    }
  m.roc_balanced = openset::roc_auroc(bs, bu);
  m.auroc_balanced = m.roc_balanced.auroc;
  m.balanced_samples = bs.size();
  return m;
}

/// OpenMax statistics from the training split's final activations.
inline openset::ClassActivationStats fit_openmax(Model& model, const train::Dataset& d, const openset::OpenMaxConfig& cfg,
                                                 std::size_t batch_size = 64) {
  const Predictions p = predict(model, d, train::training_indices(d.manifest), batch_size);
  return openset::compute_class_stats(p.logits, p.labels, p.predicted, model.config().num_classes, cfg.tail_size, true);
}

struct OpenEvaluation {
  OpenMetrics metrics;
  openset::ClassActivationStats stats;
  std::vector<std::size_t> indices;
  std::vector<double> scores;
};

inline OpenEvaluation evaluate_open(Model& model, const train::Dataset& d, const openset::OpenMaxConfig& cfg,
                                    std::size_t batch_size = 64) {
  cfg.validate();
  OpenEvaluation out;
  out.stats = fit_openmax(model, d, cfg, batch_size);
  out.indices = d.manifest.indices(synthdata::Split::test, true);
  const Predictions p = predict(model, d, out.indices, batch_size);
  std::vector<bool> unknown, balanced;
  for (std::size_t k = 0; k < out.indices.size(); ++k) {
    const auto& r = d.manifest.samples[out.indices[k]];
    out.scores.push_back(openset::unknown_score(openset::openmax_recalibrate(p.logits[k], out.stats, cfg)));
    unknown.push_back(r.is_unknown);
    balanced.push_back(r.balanced_test);
  }
  out.metrics = open_metrics(out.scores, unknown, balanced);
  out.metrics.warnings = out.stats.warnings;
  return out;
}

// ---------------------------------------------------------------------------
// Reports

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

/// Metrics document. Every summary key is always present; values that could
/// not be computed are null.
inline json metrics_json(const std::optional<ClosedMetrics>& closed, const std::optional<OpenMetrics>& open) {
  json j;
  j["top1"] = closed ? json(closed->top1) : json(nullptr);
  j["acc_many"] = closed ? optional_json(closed->group_acc[0]) : json(nullptr);
  j["acc_medium"] = closed ? optional_json(closed->group_acc[1]) : json(nullptr);
  j["acc_few"] = closed ? optional_json(closed->group_acc[2]) : json(nullptr);
  j["auroc_imbalanced"] = open ? json(open->auroc_imbalanced) : json(nullptr);
  j["auroc_balanced"] = open ? json(open->auroc_balanced) : json(nullptr);
  if (closed) {
    json classes = json::array();
    for (std::size_t c = 0; c < closed->class_acc.size(); ++c) {
      const double a = closed->class_acc[c];
      classes.push_back({{"class", c},
                         {"group", synthdata::group_name(closed->class_group[c])},
                         {"accuracy", std::isnan(a) ? json(nullptr) : json(a)}});
    }
    j["classes"] = classes;
    j["closed_samples"] = closed->samples;
  }
  if (open) {
    j["open_samples_imbalanced"] = open->imbalanced_samples;
    j["open_samples_balanced"] = open->balanced_samples;
    j["openmax_warnings"] = open->warnings;
  }
  return j;
}

inline std::string roc_csv(const openset::RocCurve& roc) {
  std::ostringstream os;
  os.precision(17);
  os << "threshold,fpr,tpr\n";
  for (const auto& p : roc.points) os << p.threshold << ',' << p.fpr << ',' << p.tpr << '\n';
  return os.str();
}

/// Rows of (sample, label, gamma, feature..., meta...) for the test split.
inline std::string embeddings_csv(Model& model, const train::Dataset& d, std::size_t batch_size = 64) {
  if (!model.has_meta()) throw DataError("embedding dump needs a meta-embedding checkpoint");
  const auto idx = d.manifest.indices(synthdata::Split::test, true);
  const Predictions p = predict(model, d, idx, batch_size);
  const std::size_t dim = p.features.dim(1);
  std::ostringstream os;
  os.precision(17);
  os << "sample,label,gamma";
  for (std::size_t k = 0; k < dim; ++k) os << ",f" << k;
  for (std::size_t k = 0; k < dim; ++k) os << ",m" << k;
  os << '\n';
  for (std::size_t i = 0; i < idx.size(); ++i) {
    os << d.manifest.samples[idx[i]].path << ',' << p.labels[i] << ',' << p.gamma[i];
    for (std::size_t k = 0; k < dim; ++k) os << ',' << p.features[i * dim + k];
    for (std::size_t k = 0; k < dim; ++k) os << ',' << p.meta[i * dim + k];
    os << '\n';
  }
  return os.str();
}

}  // namespace tfma::eval
