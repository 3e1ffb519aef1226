#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tfma/error.hpp"

namespace tfma::openset {

struct WeibullModel {
  double shape = 1.0;  // k
  double scale = 1.0;  // lambda
  std::size_t tail_size = 0;

  double cdf(double x) const {
    if (x <= 0.0) return 0.0;
    return 1.0 - std::exp(-std::pow(x / scale, shape));
  }

  double log_likelihood(std::span<const double> xs) const { return log_likelihood(xs, shape, scale); }

  static double log_likelihood(std::span<const double> xs, double k, double lambda) {
    double ll = 0;
    for (double x : xs) ll += std::log(k / lambda) + (k - 1) * std::log(x / lambda) - std::pow(x / lambda, k);
    return ll;
  }
};

inline constexpr double kShapeLow = 1e-2;
inline constexpr double kShapeHigh = 1e3;
inline constexpr double kShapeTolerance = 1e-10;

namespace detail {

/// Profile-likelihood shape equation for samples scaled into (0, 1]:
///   sum x^k ln x / sum x^k - 1/k - mean(ln x) = 0,
/// increasing in k. Returns the residual and its derivative.
inline std::pair<double, double> shape_equation(std::span<const double> y, double mean_log, double k) {
  double s0 = 0, s1 = 0, s2 = 0;
  for (double v : y) {
    const double l = std::log(v);
    const double p = std::pow(v, k);
    s0 += p;
    s1 += p * l;
    s2 += p * l * l;
  }
  const double f = s1 / s0 - 1.0 / k - mean_log;
  const double df = (s2 * s0 - s1 * s1) / (s0 * s0) + 1.0 / (k * k);
  return {f, df};
}

}  // namespace detail

/// Two-parameter Weibull maximum-likelihood fit on the `tail_size` largest
/// samples. The shape is found by safeguarded Newton (bisection fallback) on
/// [1e-2, 1e3]; the scale follows in closed form.
inline WeibullModel fit_weibull(std::span<const double> samples, std::size_t tail_size) {
  if (tail_size < 2) throw ConfigError("Weibull tail size must be at least 2");
  if (samples.size() < tail_size) {
    throw DataError("Weibull fit needs " + std::to_string(tail_size) + " samples, got " + std::to_string(samples.size()));
  }
  std::vector<double> tail(samples.begin(), samples.end());
  std::partial_sort(tail.begin(), tail.begin() + static_cast<std::ptrdiff_t>(tail_size), tail.end(), std::greater<>());
  tail.resize(tail_size);
  for (double x : tail)
    if (!(x > 0.0) || !std::isfinite(x)) throw DataError("Weibull samples must be positive and finite");
  const double top = tail.front();
  if (tail.back() == top) throw DataError("degenerate Weibull tail (all values equal); class needs more data");

  // Shape is scale-free, so fit on x / max to keep x^k in range.
  std::vector<double> y(tail.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = tail[i] / top;
  double mean_log = 0;
  for (double v : y) mean_log += std::log(v);
  mean_log /= static_cast<double>(y.size());

  double lo = kShapeLow, hi = kShapeHigh, k;
  if (detail::shape_equation(y, mean_log, lo).first >= 0) {
    k = lo;
  } else if (detail::shape_equation(y, mean_log, hi).first <= 0) {
    k = hi;
  } else {
    k = 1.0;
    for (int iter = 0; iter < 500; ++iter) {
      const auto [f, df] = detail::shape_equation(y, mean_log, k);
      if (std::fabs(f) <= kShapeTolerance) break;
      (f < 0 ? lo : hi) = k;
      double next = k - f / df;
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      k = next;
    }
  }
  double mean_pow = 0;
  for (double v : y) mean_pow += std::pow(v, k);
  mean_pow /= static_cast<double>(y.size());
  return {k, top * std::pow(mean_pow, 1.0 / k), tail_size};
}

// ---------------------------------------------------------------------------

struct ClassStats {
  std::vector<double> mav;
  WeibullModel weibull;
  std::size_t correct = 0;
};

struct OpenMaxConfig {
  std::size_t tail_size = 20;
  std::size_t alpha = 3;  // clipped to N at use

  void validate() const {
    if (tail_size < 2) throw ConfigError("OpenMax tail size must be at least 2");
  }
};

struct ClassActivationStats {
  std::vector<ClassStats> classes;
  std::vector<std::string> warnings;

  std::size_t num_classes() const { return classes.size(); }
};

inline double euclidean(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// Distances from each member row to the class MAV, sorted descending.
inline std::vector<double> sorted_distances(const std::vector<std::vector<double>>& rows, std::span<const double> mav) {
  std::vector<double> d;
  for (const auto& r : rows) d.push_back(euclidean(r, mav));
  std::sort(d.begin(), d.end(), std::greater<>());
  return d;
}

/// Per-class MAV over correctly classified samples and a Weibull fit on the
/// largest distances to it. A class with fewer correct samples than the tail
/// size is fitted on all of them (at least 2) and a warning is recorded.
/// With `fallback_to_all`, a class with fewer than 3 correct samples uses all
/// of its labelled samples instead.
inline ClassActivationStats compute_class_stats(const std::vector<std::vector<double>>& activations,
                                                std::span<const int> labels, std::span<const int> predictions,
                                                std::size_t num_classes, std::size_t tail_size,
                                                bool fallback_to_all = false) {
  if (activations.size() != labels.size() || labels.size() != predictions.size()) {
    throw ShapeError("activations, labels and predictions must have the same length");
  }
  ClassActivationStats out;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<std::vector<double>> members;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == static_cast<int>(c) && predictions[i] == labels[i]) members.push_back(activations[i]);
    if (fallback_to_all && members.size() < 3) {
      members.clear();
      for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == static_cast<int>(c)) members.push_back(activations[i]);
      out.warnings.push_back("class " + std::to_string(c) + ": too few correct samples, using all " +
                             std::to_string(members.size()) + " labelled samples");
    }
    if (members.empty()) throw DataError("class " + std::to_string(c) + " has no correctly classified samples");
    if (members.front().size() != num_classes) throw ShapeError("activation dimension must equal the class count");
    ClassStats s;
    s.correct = members.size();
    s.mav.assign(num_classes, 0.0);
    for (const auto& r : members)
      for (std::size_t j = 0; j < num_classes; ++j) s.mav[j] += r[j];
    for (double& m : s.mav) m /= static_cast<double>(members.size());
    std::size_t eta = tail_size;
    if (members.size() < tail_size) {
      eta = members.size();
      if (eta < 2) throw DataError("class " + std::to_string(c) + " has a single correct sample; cannot fit a tail");
      out.warnings.push_back("class " + std::to_string(c) + ": tail size reduced to " + std::to_string(eta));
    }
    const auto dist = sorted_distances(members, s.mav);
    try {
      s.weibull = fit_weibull(dist, eta);
    } catch (const DataError& e) {
      throw DataError("class " + std::to_string(c) + ": " + e.what());
    }
    out.classes.push_back(std::move(s));
  }
  return out;
}

/// OpenMax recalibration. The top-alpha classes by activation lose a fraction
/// of their activation, weighted by rank ((alpha - i) / alpha for the i-th
/// highest, i = 0..alpha-1) and by the Weibull CDF of the distance to their
/// MAV; the removed mass becomes the unknown activation. Returns the
/// pre-softmax activations [unknown, v_1..v_N].
inline std::vector<double> openmax_activations(std::span<const double> activation, const ClassActivationStats& stats,
                                               std::size_t alpha) {
  const std::size_t n = activation.size();
  if (stats.num_classes() != n) throw ShapeError("OpenMax stats fitted for a different class count");
  alpha = std::min(alpha, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return activation[a] > activation[b]; });
  std::vector<double> out(n + 1);
  for (std::size_t j = 0; j < n; ++j) out[j + 1] = activation[j];
  double unknown = 0;
  for (std::size_t i = 0; i < alpha; ++i) {
    const std::size_t j = order[i];
    const double rank_weight = static_cast<double>(alpha - i) / static_cast<double>(alpha);
    const double w = 1.0 - rank_weight * stats.classes[j].weibull.cdf(euclidean(activation, stats.classes[j].mav));
    out[j + 1] = activation[j] * w;
    unknown += activation[j] * (1.0 - w);
  }
  out[0] = unknown;
  return out;
}

inline std::vector<double> softmax(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double total = 0;
  for (std::size_t i = 0; i < v.size(); ++i) total += out[i] = std::exp(v[i] - m);
  for (double& x : out) x /= total;
  return out;
}

/// Probabilities over [unknown, class 1..N].
inline std::vector<double> openmax_recalibrate(std::span<const double> activation, const ClassActivationStats& stats,
                                               const OpenMaxConfig& cfg) {
  return softmax(openmax_activations(activation, stats, cfg.alpha));
}

/// Probability mass of the unknown class (index 0).
inline double unknown_score(std::span<const double> probabilities) {
  if (probabilities.empty()) throw ShapeError("empty probability vector");
  return probabilities[0];
}

/// Number of samples rejected as unknown at threshold tau (score >= tau).
inline std::size_t count_rejected(std::span<const double> scores, double tau) {
  return static_cast<std::size_t>(std::count_if(scores.begin(), scores.end(), [&](double s) { return s >= tau; }));
}

// ---------------------------------------------------------------------------

struct RocPoint {
  double threshold;
  double fpr;
  double tpr;
};

struct RocCurve {
  std::vector<RocPoint> points;
  double auroc = 0;
};

/// ROC with unknown as the positive class. Equal scores form one threshold
/// step, so ties contribute half credit to the area.
inline RocCurve roc_auroc(std::span<const double> scores, const std::vector<bool>& is_unknown) {
  if (scores.size() != is_unknown.size()) throw ShapeError("scores and labels differ in length");
  const std::size_t pos = static_cast<std::size_t>(std::count(is_unknown.begin(), is_unknown.end(), true));
  const std::size_t neg = is_unknown.size() - pos;
  if (pos == 0 || neg == 0) throw DataError("ROC needs both unknown and known samples");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  RocCurve roc;
  roc.points.push_back({INFINITY, 0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == t; ++i) (is_unknown[order[i]] ? tp : fp)++;
    const RocPoint prev = roc.points.back();
    const RocPoint cur{t, double(fp) / double(neg), double(tp) / double(pos)};
    roc.auroc += (cur.fpr - prev.fpr) * 0.5 * (cur.tpr + prev.tpr);
    roc.points.push_back(cur);
  }
  return roc;
}

/// P(score_unknown > score_known) + 0.5 P(tie), by exhaustive comparison.
inline double pairwise_auroc(std::span<const double> scores, const std::vector<bool>& is_unknown) {
  double wins = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!is_unknown[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (is_unknown[j]) continue;
      ++pairs;
      wins += scores[i] > scores[j] ? 1.0 : (scores[i] == scores[j] ? 0.5 : 0.0);
    }
  }
  if (pairs == 0) throw DataError("pairwise AUROC needs both classes");
  return wins / static_cast<double>(pairs);
}

// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const ClassActivationStats& s) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < s.classes.size(); ++c) {
    const auto& cs = s.classes[c];
    classes.push_back({{"class", c},
                       {"mav", cs.mav},
                       {"k", cs.weibull.shape},
                       {"lambda", cs.weibull.scale},
                       {"eta", cs.weibull.tail_size},
                       {"correct", cs.correct}});
  }
  return {{"classes", classes}, {"warnings", s.warnings}};
}

inline ClassActivationStats stats_from_json(const nlohmann::json& j) {
  ClassActivationStats s;
  for (const auto& c : j.at("classes")) {
    ClassStats cs;
    cs.mav = c.at("mav").get<std::vector<double>>();
    cs.weibull = {c.at("k"), c.at("lambda"), c.at("eta")};
    cs.correct = c.at("correct");
    s.classes.push_back(std::move(cs));
  }
  s.warnings = j.at("warnings").get<std::vector<std::string>>();
  return s;
}

}  // namespace tfma::openset
