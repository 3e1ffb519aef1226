#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tfma/error.hpp"

namespace tfma {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major array of doubles with an optional gradient slot.
///
/// Tensor is a shared handle: copies alias the same storage, which is what the
/// tape needs to route gradients back to parameters. Use clone() for a deep
/// copy and detach() for a copy that is cut from the graph.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    validate_shape(shape);
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    validate_shape(shape);
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
  }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values), requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl().shape.at(axis); }
  std::size_t numel() const { return impl().data.size(); }

  std::span<double> data() { return impl().data; }
  std::span<const double> data() const { return impl().data; }
  std::vector<double>& storage() { return impl().data; }

  double& operator[](std::size_t i) { return impl().data[i]; }
  double operator[](std::size_t i) const { return impl().data[i]; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl().data[0];
  }

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool on) { impl().requires_grad = on; }

  // The gradient slot is bookkeeping owned by the shared storage, so it can
  // be written through const handles (the tape holds const captures).
  bool has_grad() const { return !impl().grad.empty(); }
  std::span<double> grad() const { return shared().grad; }

  /// Gradient buffer, allocated as zeros on first use.
  std::span<double> grad_buffer() const {
    auto& g = shared().grad;
    if (g.empty()) g.assign(numel(), 0.0);
    return g;
  }

  void zero_grad() const {
    auto& g = shared().grad;
    std::fill(g.begin(), g.end(), 0.0);
  }
  void clear_grad() const { shared().grad.clear(); }

  Tensor clone() const {
    Tensor out(shape(), std::vector<double>(data().begin(), data().end()), requires_grad());
    out.impl_->grad = impl().grad;
    return out;
  }

  Tensor detach() const { return Tensor(shape(), std::vector<double>(data().begin(), data().end())); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const void* id() const { return impl_.get(); }

  bool all_finite() const {
    for (double v : data())
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (std::size_t d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }

  detail::TensorImpl& impl() {
    if (!impl_) throw Error("use of undefined tensor");
    return *impl_;
  }
  const detail::TensorImpl& impl() const {
    if (!impl_) throw Error("use of undefined tensor");
    return *impl_;
  }
  detail::TensorImpl& shared() const {
    if (!impl_) throw Error("use of undefined tensor");
    return *impl_;
  }

  std::shared_ptr<detail::TensorImpl> impl_;
};

inline void require_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericalError(std::string("non-finite output from ") + op);
}

}  // namespace tfma
