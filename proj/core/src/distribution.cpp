// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipa/distribution.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ipa/errors.hpp"

namespace ipa {

Distribution::Distribution(std::vector<double> probs) : probs_(std::move(probs)) {
  double total = 0.0;
  for (double p : probs_) {
    if (!std::isfinite(p) || p < 0.0) throw DomainError("distribution entry is negative or non-finite");
    total += p;
  }
  if (probs_.empty() || std::abs(total - 1.0) > kTolerance) {
    throw DomainError("distribution sums to " + std::to_string(total));
  }
}

Distribution Distribution::uniform(std::size_t n) {
  return Distribution(std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

Distribution Distribution::one_hot(std::size_t n, std::size_t index) {
  std::vector<double> p(n, 0.0);
  p.at(index) = 1.0;
  return Distribution(std::move(p));
}

Distribution Distribution::normalized(std::vector<double> weights) {
  double total = 0.0;
  for (double w : weights) {
    if (!std::isfinite(w) || w < 0.0) throw DomainError("weights must be finite and non-negative");
    total += w;
  }
  if (!(total > 0.0)) throw DomainError("weights sum to zero");
  for (double& w : weights) w /= total;
  return Distribution(std::move(weights));
}

std::vector<double> log_softmax(std::span<const float> logits, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  std::vector<double> out(logits.size());
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = static_cast<double>(logits[i]) / temperature;
    m = std::max(m, out[i]);
  }
  double s = 0.0;
  for (double v : out) s += std::exp(v - m);
  const double lse = m + std::log(s);
  for (double& v : out) v -= lse;
  return out;
}

Distribution Distribution::from_logits(std::span<const float> logits, double temperature) {
  return from_log_probs(log_softmax(logits, temperature));
}

Distribution Distribution::from_log_probs(std::span<const double> log_probs) {
  std::vector<double> p(log_probs.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(log_probs[i]);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return Distribution(std::move(p));
}

double Distribution::sum() const noexcept {
  double total = 0.0;
  for (double p : probs_) total += p;
  return total;
}

std::size_t Distribution::argmax() const noexcept {
  return static_cast<std::size_t>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
}

double Distribution::entropy() const noexcept {
  double h = 0.0;
  for (double p : probs_) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

Distribution without_control_tokens(const Distribution& dist, const Vocab& vocab) {
  std::vector<double> p(dist.probs().begin(), dist.probs().end());
  for (TokenId id : vocab.control_ids()) {
    if (static_cast<std::size_t>(id) < p.size()) p[static_cast<std::size_t>(id)] = 0.0;
  }
  return Distribution::normalized(std::move(p));
}

}  // namespace ipa
