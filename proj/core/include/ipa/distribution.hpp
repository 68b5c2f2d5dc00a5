// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ipa/vocab.hpp"

namespace ipa {

/// Normalised next-token probabilities. Stored in 64-bit so that fused and
/// filtered distributions stay normalised to 1e-9.
class Distribution {
 public:
  static constexpr double kTolerance = 1e-6;

  Distribution() = default;
  /// DomainError unless entries are finite, non-negative and sum to 1 within
  /// kTolerance.
  explicit Distribution(std::vector<double> probs);

  static Distribution uniform(std::size_t n);
  static Distribution one_hot(std::size_t n, std::size_t index);
  /// Renormalises non-negative weights; DomainError when they sum to zero.
  static Distribution normalized(std::vector<double> weights);
  /// softmax(logits / temperature), max-shifted. DomainError for temperature <= 0.
  static Distribution from_logits(std::span<const float> logits, double temperature = 1.0);
  static Distribution from_log_probs(std::span<const double> log_probs);

  std::size_t size() const noexcept { return probs_.size(); }
  double operator[](std::size_t i) const noexcept { return probs_[i]; }
  std::span<const double> probs() const noexcept { return probs_; }
  double sum() const noexcept;
  std::size_t argmax() const noexcept;
  double entropy() const noexcept;

 private:
  std::vector<double> probs_;
};

/// Zeroes control-token mass and renormalises.
Distribution without_control_tokens(const Distribution& dist, const Vocab& vocab);

/// log-softmax of logits / temperature in 64-bit.
std::vector<double> log_softmax(std::span<const float> logits, double temperature = 1.0);

}  // namespace ipa
