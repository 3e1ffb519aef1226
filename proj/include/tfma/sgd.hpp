#pragma once

#include <string>
#include <vector>

#include "tfma/error.hpp"
#include "tfma/tensor.hpp"

namespace tfma {

struct SgdConfig {
  double learning_rate = 0.1;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  int epochs = 90;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (epochs <= 0) throw ConfigError("epochs must be positive");
  }
};

/// Momentum buffers, one per registered parameter.
struct SgdState {
  std::vector<std::vector<double>> velocity;
};

/// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
/// Gradients are cleared afterwards. `learning_rate` overrides cfg's value
/// when a schedule is in use; a zero rate leaves parameters untouched.
inline void sgd_step(std::vector<Tensor>& params, SgdState& state, const SgdConfig& cfg, double learning_rate) {
  if (state.velocity.size() != params.size()) {
    state.velocity.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) state.velocity[i].assign(params[i].numel(), 0.0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad()) throw Error("parameter " + std::to_string(i) + " has no gradient");
    auto data = p.data();
    auto grad = p.grad();
    auto& v = state.velocity[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      v[j] = cfg.momentum * v[j] + grad[j] + cfg.weight_decay * data[j];
      data[j] -= learning_rate * v[j];
    }
    p.clear_grad();
  }
}

inline void sgd_step(std::vector<Tensor>& params, SgdState& state, const SgdConfig& cfg) {
  sgd_step(params, state, cfg, cfg.learning_rate);
}

}  // namespace tfma
