// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ipa/policy.hpp"

namespace ipa {

using TokenSet = std::set<TokenId>;

/// A named pure reward over (prompt, output) with a declared codomain.
struct RewardSpec {
  using Fn = std::function<double(std::span<const TokenId> prompt, std::span<const TokenId> output)>;

  std::string name;
  Fn fn;
  double lo = 0.0;
  double hi = 1.0;

  /// Evaluates `fn`; CodomainError when the value is non-finite or outside
  /// [lo, hi].
  double operator()(std::span<const TokenId> prompt, std::span<const TokenId> output) const;
};

/// Product of [0, 1] components. CodomainError when any component leaves [0, 1].
double product_reward(std::span<const RewardSpec> components, std::span<const TokenId> prompt,
                      std::span<const TokenId> output);

class CompositeReward {
 public:
  explicit CompositeReward(std::vector<RewardSpec> components);
  double operator()(std::span<const TokenId> prompt, std::span<const TokenId> output) const;
  const std::vector<RewardSpec>& components() const noexcept { return components_; }
  /// The product as a single [0, 1] spec named "a*b*...".
  RewardSpec as_spec() const;

 private:
  std::vector<RewardSpec> components_;
};

// Toxicity, coverage and diversity look at content tokens only: a trailing
// EOS is dropped before counting.

/// Fraction of output tokens in `toxic`; 0 for an empty output.
double toxicity_score(std::span<const TokenId> output, const TokenSet& toxic);
/// 1 - toxicity_score.
double toxicity_reward(std::span<const TokenId> output, const TokenSet& toxic);
/// ConfigError when `toxic` contains special or control tokens.
RewardSpec toxicity_reward_spec(const Vocab& vocab, TokenSet toxic);

/// 1 when `keywords` occur in `output` as an ordered subsequence, else 0.
/// DomainError for an empty keyword list.
double ordered_coverage(std::span<const TokenId> output, std::span<const TokenId> keywords);

/// exp(sequence_logprob / |output|) under `reference`, scored after `prompt`;
/// 1 for an empty output. The output is scored exactly as given (EOS included).
double fluency_proxy(const PolicyHandle& reference, std::span<const TokenId> prompt, std::span<const TokenId> output);
RewardSpec fluency_reward_spec(PolicyHandle reference);

/// Keywords are read from the prompt by `keywords_of`.
RewardSpec coverage_reward_spec(std::function<TokenSeq(std::span<const TokenId> prompt)> keywords_of);

}  // namespace ipa
