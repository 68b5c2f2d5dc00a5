// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipa/rewards.hpp"

#include <cmath>

namespace ipa {

double RewardSpec::operator()(std::span<const TokenId> prompt, std::span<const TokenId> output) const {
  const double v = fn(prompt, output);
  if (!std::isfinite(v) || v < lo || v > hi) {
    throw CodomainError("reward '" + name + "' returned " + std::to_string(v) + " outside [" + std::to_string(lo) +
                        ", " + std::to_string(hi) + "]");
  }
  return v;
}

double product_reward(std::span<const RewardSpec> components, std::span<const TokenId> prompt,
                      std::span<const TokenId> output) {
  double value = 1.0;
  for (const RewardSpec& c : components) {
    const double v = c.fn(prompt, output);
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
      throw CodomainError("component '" + c.name + "' returned " + std::to_string(v) + " outside [0, 1]");
    }
    value *= v;
  }
  return value;
}

CompositeReward::CompositeReward(std::vector<RewardSpec> components) : components_(std::move(components)) {
  for (const RewardSpec& c : components_) {
    if (c.lo < 0.0 || c.hi > 1.0) throw CodomainError("component '" + c.name + "' does not declare a [0, 1] codomain");
  }
}

double CompositeReward::operator()(std::span<const TokenId> prompt, std::span<const TokenId> output) const {
  return product_reward(components_, prompt, output);
}

RewardSpec CompositeReward::as_spec() const {
  std::string name;
  for (const RewardSpec& c : components_) name += (name.empty() ? "" : "*") + c.name;
  return RewardSpec{name, [self = *this](auto p, auto o) { return self(p, o); }, 0.0, 1.0};
}

double toxicity_score(std::span<const TokenId> output, const TokenSet& toxic) {
  const TokenSeq content = strip_eos(output);
  if (content.empty()) return 0.0;
  std::size_t hits = 0;
  for (TokenId t : content) hits += toxic.contains(t) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(content.size());
}

double toxicity_reward(std::span<const TokenId> output, const TokenSet& toxic) {
  return 1.0 - toxicity_score(output, toxic);
}

RewardSpec toxicity_reward_spec(const Vocab& vocab, TokenSet toxic) {
  for (TokenId t : toxic) {
    if (!vocab.contains(t) || vocab.is_special(t) || vocab.is_control(t)) {
      throw ConfigError("toxic token " + std::to_string(t) + " must be an ordinary symbol");
    }
  }
  return RewardSpec{"toxicity_reward",
                    [toxic = std::move(toxic)](auto, auto output) { return toxicity_reward(output, toxic); }, 0.0,
                    1.0};
}

double ordered_coverage(std::span<const TokenId> output, std::span<const TokenId> keywords) {
  if (keywords.empty()) throw DomainError("ordered_coverage needs at least one keyword");
  std::size_t k = 0;
  for (TokenId t : strip_eos(output)) {
    if (t == keywords[k] && ++k == keywords.size()) return 1.0;
  }
  return 0.0;
}

double fluency_proxy(const PolicyHandle& reference, std::span<const TokenId> prompt, std::span<const TokenId> output) {
  if (output.empty()) return 1.0;
  return std::exp(sequence_logprob(reference, prompt, output) / static_cast<double>(output.size()));
}

RewardSpec fluency_reward_spec(PolicyHandle reference) {
  return RewardSpec{"fluency",
                    [ref = std::move(reference)](auto prompt, auto output) { return fluency_proxy(ref, prompt, output); },
                    0.0, 1.0};
}

RewardSpec coverage_reward_spec(std::function<TokenSeq(std::span<const TokenId> prompt)> keywords_of) {
  return RewardSpec{"coverage",
                    [kw = std::move(keywords_of)](auto prompt, auto output) {
                      const TokenSeq keys = kw(prompt);
                      return ordered_coverage(output, keys);
                    },
                    0.0, 1.0};
}

}  // namespace ipa
