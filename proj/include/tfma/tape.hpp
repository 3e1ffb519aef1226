#pragma once

#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "tfma/tensor.hpp"

namespace tfma {

/// Ordered record of differentiable operations.
///
/// Operations append themselves while a TapeScope for this tape is active on
/// the current thread. Entries are recorded in execution order, so a reverse
/// walk is a valid reverse topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& output)>;

  struct Entry {
    std::string name;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  void record(std::string name, std::vector<Tensor> inputs, Tensor output, BackwardFn backward) {
    entries_.push_back({std::move(name), std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad input.
  /// Leaf gradients accumulate across calls until cleared.
  void backward(Tensor& loss) {
    if (loss.numel() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (entries_.empty()) throw Error("backward called on an empty tape");
    loss.grad_buffer()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->backward(it->output);
    }
    for (auto& e : entries_)
      for (auto& in : e.inputs)
        if (in.requires_grad()) in.grad_buffer();
  }

 private:
  std::vector<Entry> entries_;
};

namespace detail {
inline thread_local Tape* active_tape = nullptr;
}

/// The tape receiving operations on this thread, or nullptr (no recording).
inline Tape* active_tape() { return detail::active_tape; }

/// Activates a tape for the current thread for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape) { detail::active_tape = &tape; }
  ~TapeScope() { detail::active_tape = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording (evaluation passes).
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape) { detail::active_tape = nullptr; }
  ~NoGradScope() { detail::active_tape = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

/// Returns the active tape when any input needs a gradient, else nullptr.
inline Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = active_tape();
  if (!tape) return nullptr;
  for (const Tensor* t : inputs)
    if (t && t->defined() && t->requires_grad()) return tape;
  return nullptr;
}

/// Convenience: backward on the active tape.
inline void backward(Tensor& loss) {
  Tape* tape = active_tape();
  if (!tape) throw Error("backward called with no active tape");
  tape->backward(loss);
}

}  // namespace tfma
