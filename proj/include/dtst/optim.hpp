#pragma once

#include <string>
#include <vector>

#include "dtst/error.hpp"
#include "dtst/tensor.hpp"

namespace dtst {

/// A trainable tensor with a stable name (checkpoint key, gradcheck group).
struct NamedParam {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

/// SGD with heavy-ball momentum. Velocities are created lazily on the first
/// step and matched to parameters by position.
struct SgdState {
  double learning_rate = 8e-3;
  double momentum = 0.9;
  std::vector<std::vector<double>> velocity;
};

inline void zero_grads(ParamList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

/// v <- momentum * v + g ; w <- w - lr * v
inline void sgd_step(ParamList& params, SgdState& state) {
  if (!(state.learning_rate >= 0.0)) throw DomainError("sgd_step: learning rate must be nonnegative");
  if (!(state.momentum >= 0.0 && state.momentum < 1.0))
    throw DomainError("sgd_step: momentum must lie in [0, 1)");
  for (const auto& p : params)
    if (!p.tensor.has_grad()) throw ContractError("sgd_step: parameter '" + p.name + "' has no gradient");

  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.emplace_back(p.tensor.numel(), 0.0);
  }
  if (state.velocity.size() != params.size())
    throw ContractError("sgd_step: optimizer state tracks " + std::to_string(state.velocity.size()) +
                        " parameters, got " + std::to_string(params.size()));

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& v = state.velocity[i];
    auto w = params[i].tensor.mutable_data();
    auto g = params[i].tensor.grad();
    if (v.size() != w.size())
      throw ContractError("sgd_step: velocity shape mismatch for '" + params[i].name + "'");
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = state.momentum * v[j] + g[j];
      w[j] -= state.learning_rate * v[j];
    }
  }
}

}  // namespace dtst
