#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tfma/tape.hpp"
#include "tfma/tensor.hpp"

namespace tfma {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline void accumulate(const Tensor& target, std::span<const double> delta) {
  if (!target.requires_grad()) return;
  auto g = target.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

inline Tensor finish(Tensor out, const char* op) {
  require_finite(out, op);
  return out;
}

template <class Forward, class Derivative>
Tensor unary(const Tensor& a, const char* name, Forward f, Derivative df) {
  Tensor out(a.shape());
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  finish(out, name);
  if (Tape* tape = recording_tape({&a})) {
    out.set_requires_grad(true);
    tape->record(name, {a}, out, [a, df](const Tensor& o) mutable {
      auto g = o.grad();
      auto x = a.data();
      auto y = o.data();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
    });
  }
  return out;
}

}  // namespace detail

enum class OpKind { add, sub, mul, relu, tanh, sigmoid, abs, exp, neg, log, reciprocal, square };

inline bool is_binary(OpKind kind) {
  return kind == OpKind::add || kind == OpKind::sub || kind == OpKind::mul;
}

/// How the second operand of a binary elementwise op maps onto the first.
enum class Broadcast { same, scalar, channel };

inline Broadcast broadcast_mode(const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::same;
  if (shape_numel(b) == 1) return Broadcast::scalar;
  if (b.size() == 1 && a.size() >= 2 && b[0] == a[1]) return Broadcast::channel;
  throw ShapeError("cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
}

namespace detail {

struct ChannelLayout {
  std::size_t channels = 1;
  std::size_t inner = 1;
};

inline ChannelLayout channel_layout(const Shape& a) {
  ChannelLayout layout;
  layout.channels = a.size() >= 2 ? a[1] : 1;
  for (std::size_t d = 2; d < a.size(); ++d) layout.inner *= a[d];
  return layout;
}

inline Tensor binary(OpKind kind, const Tensor& a, const Tensor& b) {
  const Broadcast mode = broadcast_mode(a.shape(), b.shape());
  const ChannelLayout layout = channel_layout(a.shape());
  auto index_b = [mode, layout](std::size_t i) -> std::size_t {
    switch (mode) {
      case Broadcast::same: return i;
      case Broadcast::scalar: return 0;
      case Broadcast::channel: return (i / layout.inner) % layout.channels;
    }
    return 0;
  };
  Tensor out(a.shape());
  auto x = a.data();
  auto z = b.data();
  auto y = out.data();
  const char* name = kind == OpKind::add ? "add" : kind == OpKind::sub ? "sub" : "mul";
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double bv = z[index_b(i)];
    switch (kind) {
      case OpKind::add: y[i] = x[i] + bv; break;
      case OpKind::sub: y[i] = x[i] - bv; break;
      default: y[i] = x[i] * bv; break;
    }
  }
  finish(out, name);
  if (Tape* tape = recording_tape({&a, &b})) {
    out.set_requires_grad(true);
    tape->record(name, {a, b}, out, [a, b, kind, index_b](const Tensor& o) mutable {
      auto g = o.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        auto z = b.data();
        for (std::size_t i = 0; i < g.size(); ++i)
          ga[i] += kind == OpKind::mul ? g[i] * z[index_b(i)] : g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double d = kind == OpKind::add ? g[i] : kind == OpKind::sub ? -g[i] : g[i] * x[i];
          gb[index_b(i)] += d;
        }
      }
    });
  }
  return out;
}

}  // namespace detail

/// Elementwise operation. Binary kinds accept b with the same shape, a single
/// element, or a vector broadcast along axis 1 (the channel axis).
inline Tensor elementwise(OpKind kind, const Tensor& a, const Tensor* b = nullptr) {
  if (is_binary(kind)) {
    if (!b || !b->defined()) throw ShapeError("binary elementwise op requires a second operand");
    return detail::binary(kind, a, *b);
  }
  switch (kind) {
    case OpKind::relu:
      return detail::unary(a, "relu", [](double x) { return x > 0 ? x : 0.0; },
                           [](double x, double) { return x > 0 ? 1.0 : 0.0; });
    case OpKind::tanh:
      return detail::unary(a, "tanh", [](double x) { return std::tanh(x); },
                           [](double, double y) { return 1.0 - y * y; });
    case OpKind::sigmoid:
      return detail::unary(a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                           [](double, double y) { return y * (1.0 - y); });
    case OpKind::abs:
      // Subgradient of |x| at 0 is taken as 0.
      return detail::unary(a, "abs", [](double x) { return std::abs(x); },
                           [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
    case OpKind::exp:
      return detail::unary(a, "exp", [](double x) { return std::exp(x); },
                           [](double, double y) { return y; });
    case OpKind::neg:
      return detail::unary(a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
    case OpKind::log:
      return detail::unary(a, "log", [](double x) { return std::log(x); },
                           [](double x, double) { return 1.0 / x; });
    case OpKind::reciprocal:
      return detail::unary(a, "reciprocal", [](double x) { return 1.0 / x; },
                           [](double, double y) { return -y * y; });
    case OpKind::square:
      return detail::unary(a, "square", [](double x) { return x * x; },
                           [](double x, double) { return 2.0 * x; });
    default: break;
  }
  throw ShapeError("unary elementwise op given an unsupported kind");
}

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(OpKind::add, a, &b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(OpKind::sub, a, &b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(OpKind::mul, a, &b); }
inline Tensor relu(const Tensor& a) { return elementwise(OpKind::relu, a); }
inline Tensor tanh(const Tensor& a) { return elementwise(OpKind::tanh, a); }
inline Tensor sigmoid(const Tensor& a) { return elementwise(OpKind::sigmoid, a); }
inline Tensor abs(const Tensor& a) { return elementwise(OpKind::abs, a); }
inline Tensor exp(const Tensor& a) { return elementwise(OpKind::exp, a); }
inline Tensor neg(const Tensor& a) { return elementwise(OpKind::neg, a); }
inline Tensor log(const Tensor& a) { return elementwise(OpKind::log, a); }
inline Tensor reciprocal(const Tensor& a) { return elementwise(OpKind::reciprocal, a); }
inline Tensor square(const Tensor& a) { return elementwise(OpKind::square, a); }

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary(a, "add_scalar", [c](double x) { return x + c; },
                       [](double, double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  return detail::unary(a, "mul_scalar", [c](double x) { return x * c; },
                       [c](double, double) { return c; });
}

/// Clamp into [lo, hi]; the gradient is passed only strictly inside.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary(a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
                       [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

/// max(x, lo); the gradient is blocked where the floor is engaged.
inline Tensor floor_at(const Tensor& a, double lo) {
  return detail::unary(a, "floor_at", [lo](double x) { return x < lo ? lo : x; },
                       [lo](double x, double) { return x < lo ? 0.0 : 1.0; });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  if (Tape* tape = recording_tape({&a})) {
    out.set_requires_grad(true);
    tape->record("reshape", {a}, out, [a](const Tensor& o) mutable { detail::accumulate(a, o.grad()); });
  }
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul dimension mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Tensor out(Shape{a.dim(0), b.dim(1)});
  detail::MatrixMap(out.data().data(), m, n).noalias() =
      detail::ConstMatrixMap(a.data().data(), m, k) * detail::ConstMatrixMap(b.data().data(), k, n);
  detail::finish(out, "matmul");
  if (Tape* tape = recording_tape({&a, &b})) {
    out.set_requires_grad(true);
    tape->record("matmul", {a, b}, out, [a, b, m, k, n](const Tensor& o) mutable {
      detail::ConstMatrixMap g(o.grad().data(), m, n);
      if (a.requires_grad()) {
        detail::MatrixMap(a.grad_buffer().data(), m, k).noalias() +=
            g * detail::ConstMatrixMap(b.data().data(), k, n).transpose();
      }
      if (b.requires_grad()) {
        detail::MatrixMap(b.grad_buffer().data(), k, n).noalias() +=
            detail::ConstMatrixMap(a.data().data(), m, k).transpose() * g;
      }
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects a matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  if (Tape* tape = recording_tape({&a})) {
    out.set_requires_grad(true);
    tape->record("transpose", {a}, out, [a, m, n](const Tensor& o) mutable {
      auto g = o.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

/// Sum of all elements, as a one-element tensor.
inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  detail::finish(out, "sum");
  if (Tape* tape = recording_tape({&a})) {
    out.set_requires_grad(true);
    tape->record("sum", {a}, out, [a](const Tensor& o) mutable {
      const double g = o.grad()[0];
      for (double& v : a.grad_buffer()) v += g;
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Sum over the last axis: [..., n] -> [...] (a vector collapses to [1]).
inline Tensor sum_last(const Tensor& a) {
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  if (shape.empty()) shape = {1};
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a[r * n + j];
    out[r] = s;
  }
  detail::finish(out, "sum_last");
  if (Tape* tape = recording_tape({&a})) {
    out.set_requires_grad(true);
    tape->record("sum_last", {a}, out, [a, n, rows](const Tensor& o) mutable {
      auto g = o.grad();
      auto ga = a.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[r];
    });
  }
  return out;
}

/// Softmax along the last axis.
inline Tensor softmax_last(const Tensor& a) {
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  Tensor out(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * n;
    double* y = out.data().data() + r * n;
    const double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  detail::finish(out, "softmax");
  if (Tape* tape = recording_tape({&a})) {
    out.set_requires_grad(true);
    tape->record("softmax", {a}, out, [a, n, rows](const Tensor& o) mutable {
      auto g = o.grad();
      auto y = o.data();
      auto ga = a.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
        for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
      }
    });
  }
  return out;
}

/// Row-wise x / (||x|| + eps) for a [B, D] matrix.
inline Tensor row_normalize(const Tensor& a, double eps = 1e-12) {
  if (a.rank() != 2) throw ShapeError("row_normalize expects [B, D], got " + shape_str(a.shape()));
  const std::size_t rows = a.dim(0), d = a.dim(1);
  Tensor out(a.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += a[r * d + j] * a[r * d + j];
    norms[r] = std::sqrt(s);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = a[r * d + j] / (norms[r] + eps);
  }
  detail::finish(out, "row_normalize");
  if (Tape* tape = recording_tape({&a})) {
    out.set_requires_grad(true);
    tape->record("row_normalize", {a}, out, [a, rows, d, eps, norms](const Tensor& o) mutable {
      auto g = o.grad();
      auto ga = a.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const double n = norms[r];
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * a[r * d + j];
        const double radial = n > 0 ? dot / (n * (n + eps) * (n + eps)) : 0.0;
        for (std::size_t j = 0; j < d; ++j)
          ga[r * d + j] += g[r * d + j] / (n + eps) - a[r * d + j] * radial;
      }
    });
  }
  return out;
}

/// Euclidean (or squared Euclidean) distances between the rows of a [B, D]
/// and the rows of c [N, D], giving [B, N]. The gradient of a zero distance
/// is taken as 0.
inline Tensor pairwise_distance(const Tensor& a, const Tensor& c, bool squared = false) {
  if (a.rank() != 2 || c.rank() != 2 || a.dim(1) != c.dim(1)) {
    throw ShapeError("pairwise_distance shape mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(c.shape()));
  }
  const std::size_t rows = a.dim(0), n = c.dim(0), d = a.dim(1);
  Tensor out(Shape{rows, n});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = a[r * d + k] - c[j * d + k];
        s += diff * diff;
      }
      out[r * n + j] = squared ? s : std::sqrt(s);
    }
  detail::finish(out, "pairwise_distance");
  if (Tape* tape = recording_tape({&a, &c})) {
    out.set_requires_grad(true);
    tape->record("pairwise_distance", {a, c}, out,
                 [a, c, rows, n, d, squared](const Tensor& o) mutable {
                   auto g = o.grad();
                   auto dist = o.data();
                   std::span<double> ga, gc;
                   if (a.requires_grad()) ga = a.grad_buffer();
                   if (c.requires_grad()) gc = c.grad_buffer();
                   for (std::size_t r = 0; r < rows; ++r)
                     for (std::size_t j = 0; j < n; ++j) {
                       const double dd = dist[r * n + j];
                       double scale;
                       if (squared) scale = 2.0 * g[r * n + j];
                       else scale = dd > 0 ? g[r * n + j] / dd : 0.0;
                       if (scale == 0.0) continue;
                       for (std::size_t k = 0; k < d; ++k) {
                         const double diff = (a[r * d + k] - c[j * d + k]) * scale;
                         if (!ga.empty()) ga[r * d + k] += diff;
                         if (!gc.empty()) gc[j * d + k] -= diff;
                       }
                     }
                 });
  }
  return out;
}

/// Minimum along the last axis of a [B, N] matrix, giving [B]. The gradient
/// flows to the unique argmin; ties go to the lowest index.
inline Tensor min_last(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("min_last expects [B, N], got " + shape_str(a.shape()));
  const std::size_t rows = a.dim(0), n = a.dim(1);
  Tensor out(Shape{rows});
  std::vector<std::size_t> arg(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 1; j < n; ++j)
      if (a[r * n + j] < a[r * n + arg[r]]) arg[r] = j;
    out[r] = a[r * n + arg[r]];
  }
  if (Tape* tape = recording_tape({&a})) {
    out.set_requires_grad(true);
    tape->record("min_last", {a}, out, [a, n, arg](const Tensor& o) mutable {
      auto g = o.grad();
      auto ga = a.grad_buffer();
      for (std::size_t r = 0; r < arg.size(); ++r) ga[r * n + arg[r]] += g[r];
    });
  }
  return out;
}

/// Multiplies row b of x [B, D] by s[b].
inline Tensor scale_rows(const Tensor& x, const Tensor& s) {
  if (x.rank() != 2 || s.numel() != x.dim(0)) {
    throw ShapeError("scale_rows shape mismatch: " + shape_str(x.shape()) + " by " + shape_str(s.shape()));
  }
  const std::size_t rows = x.dim(0), d = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] * s[r];
  detail::finish(out, "scale_rows");
  if (Tape* tape = recording_tape({&x, &s})) {
    out.set_requires_grad(true);
    tape->record("scale_rows", {x, s}, out, [x, s, rows, d](const Tensor& o) mutable {
      auto g = o.grad();
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] * s[r];
      }
      if (s.requires_grad()) {
        auto gs = s.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gs[r] += g[r * d + j] * x[r * d + j];
      }
    });
  }
  return out;
}

/// [N, C, H, W] -> [N, C] spatial mean.
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool expects [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t nc = x.dim(0) * x.dim(1);
  const std::size_t hw = x.dim(2) * x.dim(3);
  Tensor out(Shape{x.dim(0), x.dim(1)});
  for (std::size_t i = 0; i < nc; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) s += x[i * hw + p];
    out[i] = s / static_cast<double>(hw);
  }
  if (Tape* tape = recording_tape({&x})) {
    out.set_requires_grad(true);
    tape->record("global_avg_pool", {x}, out, [x, nc, hw](const Tensor& o) mutable {
      auto g = o.grad();
      auto gx = x.grad_buffer();
      const double inv = 1.0 / static_cast<double>(hw);
      for (std::size_t i = 0; i < nc; ++i)
        for (std::size_t p = 0; p < hw; ++p) gx[i * hw + p] += g[i] * inv;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvGeometry {
  std::size_t n, c, h, w;        // input
  std::size_t co, kh, kw;        // kernel
  std::size_t stride, padding;
  std::size_t ho, wo;            // output
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& k, std::size_t stride, std::size_t padding) {
  if (x.size() != 4 || k.size() != 4) {
    throw ShapeError("conv2d expects [N,C,H,W] input and [Co,C,kh,kw] kernel");
  }
  if (x[1] != k[1]) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x) + ", kernel " + shape_str(k));
  }
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  const std::size_t ph = x[2] + 2 * padding, pw = x[3] + 2 * padding;
  if (k[2] > ph || k[3] > pw) {
    throw ShapeError("conv2d kernel " + shape_str(k) + " does not fit padded input " + shape_str(x));
  }
  return {x[0], x[1], x[2], x[3], k[0], k[2], k[3], stride, padding,
          (ph - k[2]) / stride + 1, (pw - k[3]) / stride + 1};
}

namespace detail {

// col[(c*kh + i)*kw + j][n*ho*wo + oy*wo + ox]
inline void im2col(const ConvGeometry& g, const double* x, double* col) {
  const std::size_t cols = g.n * g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = col + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::size_t n = 0; n < g.n; ++n) {
          const double* plane = x + (n * g.c + c) * g.h * g.w;
          double* dst = row + n * g.ho * g.wo;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.padding);
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.padding);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w);
              dst[oy * g.wo + ox] = inside ? plane[iy * static_cast<long>(g.w) + ix] : 0.0;
            }
          }
        }
      }
}

inline void col2im(const ConvGeometry& g, const double* col, double* x) {
  const std::size_t cols = g.n * g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = col + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::size_t n = 0; n < g.n; ++n) {
          double* plane = x + (n * g.c + c) * g.h * g.w;
          const double* src = row + n * g.ho * g.wo;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.padding);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.padding);
              if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
              plane[iy * static_cast<long>(g.w) + ix] += src[oy * g.wo + ox];
            }
          }
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation without bias, lowered to one GEMM per sample.
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride = 1, std::size_t padding = 0) {
  const ConvGeometry g = conv_geometry(x.shape(), kernel.shape(), stride, padding);
  const auto rows = static_cast<Eigen::Index>(g.c * g.kh * g.kw);
  const auto cols = static_cast<Eigen::Index>(g.ho * g.wo);
  const auto co = static_cast<Eigen::Index>(g.co);
  const std::size_t in_plane = g.c * g.h * g.w;
  const std::size_t out_plane = g.co * g.ho * g.wo;
  ConvGeometry one = g;
  one.n = 1;

  Tensor out(Shape{g.n, g.co, g.ho, g.wo});
  std::vector<double> col(static_cast<std::size_t>(rows * cols));
  for (std::size_t n = 0; n < g.n; ++n) {
    detail::im2col(one, x.data().data() + n * in_plane, col.data());
    detail::MatrixMap(out.data().data() + n * out_plane, co, cols).noalias() =
        detail::ConstMatrixMap(kernel.data().data(), co, rows) * detail::ConstMatrixMap(col.data(), rows, cols);
  }
  detail::finish(out, "conv2d");

  if (Tape* tape = recording_tape({&x, &kernel})) {
    out.set_requires_grad(true);
    tape->record("conv2d", {x, kernel}, out, [x, kernel, g, one, rows, cols, co, in_plane, out_plane](const Tensor& o) mutable {
      auto up = o.grad();
      std::vector<double> col(static_cast<std::size_t>(rows * cols));
      for (std::size_t n = 0; n < g.n; ++n) {
        const detail::ConstMatrixMap grad(up.data() + n * out_plane, co, cols);
        if (kernel.requires_grad()) {
          detail::im2col(one, x.data().data() + n * in_plane, col.data());
          detail::MatrixMap(kernel.grad_buffer().data(), co, rows).noalias() +=
              grad * detail::ConstMatrixMap(col.data(), rows, cols).transpose();
        }
        if (x.requires_grad()) {
          detail::MatrixMap(col.data(), rows, cols).noalias() =
              detail::ConstMatrixMap(kernel.data().data(), co, rows).transpose() * grad;
          detail::col2im(one, col.data(), x.grad_buffer().data() + n * in_plane);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel normalization

enum class Mode { train, eval };

/// Running per-channel statistics used in eval mode.
struct RunningStats {
  std::vector<double> mean;
  std::vector<double> var;
  double momentum = 0.1;

  explicit RunningStats(std::size_t channels = 0) : mean(channels, 0.0), var(channels, 1.0) {}
};

inline constexpr double kNormEpsilon = 1e-5;

/// Per-channel standardization over all axes except axis 1, followed by a
/// learnable scale and shift. Train mode uses batch statistics and updates
/// `stats`; eval mode uses `stats` and leaves them untouched.
inline Tensor channel_norm(const Tensor& x, const Tensor& scale, const Tensor& shift, RunningStats& stats,
                           Mode mode) {
  if (x.rank() < 2) throw ShapeError("channel_norm needs a channel axis, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t inner = x.numel() / (n * c);
  const std::size_t count = n * inner;
  if (count == 0) throw ShapeError("channel_norm on an empty batch");
  if (scale.numel() != c || shift.numel() != c || stats.mean.size() != c) {
    throw ShapeError("channel_norm parameter size mismatch for " + std::to_string(c) + " channels");
  }
  std::vector<double> mu(c), inv_std(c);
  if (mode == Mode::train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < inner; ++p) s += x[(b * c + ch) * inner + p];
      const double m = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < inner; ++p) {
          const double d = x[(b * c + ch) * inner + p] - m;
          v += d * d;
        }
      v /= static_cast<double>(count);
      mu[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(v + kNormEpsilon);
      const double unbiased = count > 1 ? v * static_cast<double>(count) / static_cast<double>(count - 1) : v;
      stats.mean[ch] = (1.0 - stats.momentum) * stats.mean[ch] + stats.momentum * m;
      stats.var[ch] = (1.0 - stats.momentum) * stats.var[ch] + stats.momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = stats.mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(stats.var[ch] + kNormEpsilon);
    }
  }
  Tensor xhat(x.shape());
  Tensor out(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < inner; ++p) {
        const std::size_t i = (b * c + ch) * inner + p;
        xhat[i] = (x[i] - mu[ch]) * inv_std[ch];
        out[i] = scale[ch] * xhat[i] + shift[ch];
      }
  detail::finish(out, "channel_norm");

  if (Tape* tape = recording_tape({&x, &scale, &shift})) {
    out.set_requires_grad(true);
    tape->record("channel_norm", {x, scale, shift}, out,
                 [x, scale, shift, xhat, inv_std, n, c, inner, count, mode](const Tensor& o) mutable {
                   auto g = o.grad();
                   std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                   for (std::size_t b = 0; b < n; ++b)
                     for (std::size_t ch = 0; ch < c; ++ch)
                       for (std::size_t p = 0; p < inner; ++p) {
                         const std::size_t i = (b * c + ch) * inner + p;
                         sum_g[ch] += g[i];
                         sum_gx[ch] += g[i] * xhat[i];
                       }
                   if (shift.requires_grad()) detail::accumulate(shift, sum_g);
                   if (scale.requires_grad()) detail::accumulate(scale, sum_gx);
                   if (!x.requires_grad()) return;
                   auto gx = x.grad_buffer();
                   const double inv_count = 1.0 / static_cast<double>(count);
                   for (std::size_t b = 0; b < n; ++b)
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       const double k = scale[ch] * inv_std[ch];
                       for (std::size_t p = 0; p < inner; ++p) {
                         const std::size_t i = (b * c + ch) * inner + p;
                         if (mode == Mode::train) {
                           gx[i] += k * (g[i] - sum_g[ch] * inv_count - xhat[i] * sum_gx[ch] * inv_count);
                         } else {
                           gx[i] += k * g[i];
                         }
                       }
                     }
                 });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Custom vector-Jacobian products

/// Forward rule: pure function of the input values.
using CustomForward = std::function<Tensor(std::span<const Tensor> inputs)>;
/// Backward rule: (saved inputs, upstream gradient) -> one gradient per input.
using CustomBackward = std::function<std::vector<Tensor>(std::span<const Tensor> inputs, const Tensor& upstream)>;

/// Callable operation whose gradient is supplied by the caller instead of
/// being derived from the forward computation.
class OpHandle {
 public:
  OpHandle(std::string name, CustomForward forward, CustomBackward backward)
      : state_(std::make_shared<State>(State{std::move(name), std::move(forward), std::move(backward)})) {}

  const std::string& name() const { return state_->name; }

  Tensor operator()(std::vector<Tensor> inputs) const {
    std::vector<Tensor> values;
    values.reserve(inputs.size());
    for (const auto& t : inputs) values.push_back(t.detach());
    Tensor out = state_->forward(values).detach();
    require_finite(out, state_->name.c_str());
    Tape* tape = active_tape();
    bool needs = false;
    for (const auto& t : inputs) needs = needs || t.requires_grad();
    if (tape && needs) {
      out.set_requires_grad(true);
      auto state = state_;
      tape->record(state_->name, inputs, out, [state, inputs](const Tensor& o) mutable {
        Tensor upstream(o.shape(), std::vector<double>(o.grad().begin(), o.grad().end()));
        std::vector<Tensor> grads = state->backward(inputs, upstream);
        if (grads.size() != inputs.size()) {
          throw ShapeError("custom op '" + state->name + "' returned " + std::to_string(grads.size()) +
                           " gradients for " + std::to_string(inputs.size()) + " inputs");
        }
        for (std::size_t i = 0; i < inputs.size(); ++i) {
          if (!grads[i].defined()) continue;
          if (grads[i].shape() != inputs[i].shape()) {
            throw ShapeError("custom op '" + state->name + "' gradient " + std::to_string(i) + " has shape " +
                             shape_str(grads[i].shape()) + ", input has " + shape_str(inputs[i].shape()));
          }
          detail::accumulate(inputs[i], grads[i].data());
        }
      });
    }
    return out;
  }

 private:
  struct State {
    std::string name;
    CustomForward forward;
    CustomBackward backward;
  };
  std::shared_ptr<const State> state_;
};

inline OpHandle register_custom_vjp(CustomForward forward, CustomBackward backward, std::string name = "custom") {
  return OpHandle(std::move(name), std::move(forward), std::move(backward));
}

}  // namespace tfma
