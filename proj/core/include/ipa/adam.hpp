// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ipa/tensor.hpp"

namespace ipa {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment accumulators, one pair per parameter tensor.
class AdamState {
 public:
  AdamState() = default;
  AdamState(std::span<const Tensor<float>> params, AdamConfig config = {});

  const AdamConfig& config() const noexcept { return config_; }
  std::int64_t step() const noexcept { return step_; }
  const std::vector<Tensor<float>>& first_moment() const noexcept { return m_; }
  const std::vector<Tensor<float>>& second_moment() const noexcept { return v_; }

 private:
  friend void adam_step(std::span<Tensor<float>>, std::span<const Tensor<float>>, AdamState&, double);

  AdamConfig config_;
  std::vector<Tensor<float>> m_;
  std::vector<Tensor<float>> v_;
  std::int64_t step_ = 0;
};

/// Bias-corrected Adam update, in place. An empty gradient tensor counts as
/// zero. ShapeError when params, grads and moments disagree.
void adam_step(std::span<Tensor<float>> params, std::span<const Tensor<float>> grads, AdamState& state,
               double learning_rate);

}  // namespace ipa
