// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipa/adam.hpp"

#include <cmath>
#include <string>

namespace ipa {

AdamState::AdamState(std::span<const Tensor<float>> params, AdamConfig config) : config_(config) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const Tensor<float>& p : params) {
    m_.emplace_back(p.shape());
    v_.emplace_back(p.shape());
  }
}

void adam_step(std::span<Tensor<float>> params, std::span<const Tensor<float>> grads, AdamState& state,
               double learning_rate) {
  if (params.size() != grads.size() || params.size() != state.m_.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params, " +
                     std::to_string(grads.size()) + " grads, " + std::to_string(state.m_.size()) +
                     " moment slots");
  }
  if (learning_rate < 0.0) throw DomainError("adam_step: negative learning rate");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != state.m_[i].shape() ||
        (!grads[i].empty() && grads[i].shape() != params[i].shape())) {
      throw ShapeError("adam_step: shape mismatch at parameter " + std::to_string(i));
    }
  }

  const AdamConfig& c = state.config_;
  state.step_ += 1;
  const double t = static_cast<double>(state.step_);
  const double correct1 = 1.0 - std::pow(c.beta1, t);
  const double correct2 = 1.0 - std::pow(c.beta2, t);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto m = state.m_[i].data();
    auto v = state.v_[i].data();
    const bool has_grad = !grads[i].empty();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = has_grad ? static_cast<double>(grads[i][j]) : 0.0;
      const double mj = c.beta1 * m[j] + (1.0 - c.beta1) * g;
      const double vj = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      if (learning_rate == 0.0) continue;
      const double m_hat = mj / correct1;
      const double v_hat = vj / correct2;
      p[j] = static_cast<float>(p[j] - learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon));
    }
  }
}

}  // namespace ipa
