// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "ipa/policy.hpp"
#include "ipa/rng.hpp"

namespace ipa {

struct DecoderSpec {
  enum class Kind { kGreedy, kTopK, kNucleus, kTypical };

  Kind kind = Kind::kNucleus;
  std::size_t top_k = 50;
  double top_p = 0.9;
  double typical_tau = 0.95;
  double temperature = 1.0;
  std::size_t max_length = 16;
  std::uint64_t seed = 0;

  /// DomainError unless k >= 1, p and tau in (0, 1], temperature > 0 and
  /// max_length >= 1.
  void validate() const;

  static DecoderSpec greedy(std::size_t max_length);
  static DecoderSpec sampling_top_k(std::size_t k, std::size_t max_length, std::uint64_t seed = 0);
  static DecoderSpec nucleus(double p, std::size_t max_length, std::uint64_t seed = 0);
  static DecoderSpec typical(double tau, std::size_t max_length, std::uint64_t seed = 0);
};

std::string_view decoder_kind_name(DecoderSpec::Kind kind);
/// ConfigError for unknown names (greedy | top_k | nucleus | typical).
DecoderSpec::Kind parse_decoder_kind(std::string_view name);

nlohmann::json decoder_to_json(const DecoderSpec& spec);
/// ConfigError on missing or malformed fields.
DecoderSpec decoder_from_json(const nlohmann::json& j);

// Filters rank tokens with ties broken by ascending id, keep the shortest
// ranked prefix reaching the mass threshold, and renormalise. Zero-probability
// tokens are never kept.

Distribution nucleus_filter(const Distribution& dist, double p);
Distribution top_k_filter(const Distribution& dist, std::size_t k);
/// Ranks by |-log p_i - H| ascending, H the entropy in nats.
Distribution typical_filter(const Distribution& dist, double tau);
/// p^(1/T), renormalised; identity at T = 1.
Distribution apply_temperature(const Distribution& dist, double temperature);
/// Temperature, then the spec's filter; greedy yields a one-hot at the argmax.
Distribution apply_decoder(const Distribution& dist, const DecoderSpec& spec);

/// Inverse-CDF draw from `dist`.
TokenId sample_token(const Distribution& dist, Rng& rng);

/// Generates until EOS (kept in the output) or max_length tokens.
TokenSeq sample_sequence(const SequencePolicy& policy, std::span<const TokenId> prompt, const DecoderSpec& spec,
                         Rng& rng);
/// Same, with an RNG seeded from spec.seed.
TokenSeq sample_sequence(const SequencePolicy& policy, std::span<const TokenId> prompt, const DecoderSpec& spec);

/// Adapts a callable into a SequencePolicy (tests, scripted policies).
class FunctionPolicy : public SequencePolicy {
 public:
  using Fn = std::function<Distribution(std::span<const TokenId> prompt, std::span<const TokenId> generated)>;
  FunctionPolicy(Vocab vocab, Fn fn) : vocab_(std::move(vocab)), fn_(std::move(fn)) {}
  const Vocab& vocab() const override { return vocab_; }
  Distribution next_dist(std::span<const TokenId> prompt, std::span<const TokenId> generated) const override {
    return fn_(prompt, generated);
  }

 private:
  Vocab vocab_;
  Fn fn_;
};

}  // namespace ipa
