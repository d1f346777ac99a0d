#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sbfm/errors.hpp"
#include "sbfm/tensor.hpp"

namespace sbfm {

struct OptimizerConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("optimizer: learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optimizer: momentum must be in [0,1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("optimizer: weight_decay must be >= 0");
  }
};

// Momentum buffers, one per parameter in the order passed to sgd_step.
struct SgdState {
  std::vector<std::vector<double>> velocity;
};

// v <- momentum * v + (grad + weight_decay * p);  p <- p - lr * v;  grad <- 0.
inline void sgd_step(std::span<Tensor* const> params, const OptimizerConfig& config,
                     SgdState& state) {
  config.validate();
  if (state.velocity.size() != params.size()) {
    if (!state.velocity.empty()) throw ContractError("sgd_step: parameter list changed size");
    state.velocity.resize(params.size());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    if (p.grad.size() != p.values.size()) {
      throw ContractError("sgd_step: parameter " + std::to_string(i) + " has no gradient");
    }
    auto& v = state.velocity[i];
    if (v.size() != p.values.size()) v.assign(p.values.size(), 0.0);
    for (std::size_t k = 0; k < p.values.size(); ++k) {
      const double g = p.grad[k] + config.weight_decay * p.values[k];
      v[k] = config.momentum * v[k] + g;
      p.values[k] -= config.learning_rate * v[k];
    }
    p.zero_grad();
  }
}

}  // namespace sbfm
