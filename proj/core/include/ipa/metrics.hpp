// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "ipa/decoding.hpp"
#include "ipa/rewards.hpp"

namespace ipa {

/// scores[i][j]: toxicity of sample j for prompt i.
using ScoreMatrix = std::vector<std::vector<double>>;
/// samples[i][j]: output j for prompt i.
using SampleMatrix = std::vector<std::vector<TokenSeq>>;

/// Mean over prompts of the per-prompt maximum. EmptyEvalSet without prompts,
/// DomainError for a prompt without samples.
double avg_max_toxicity(const ScoreMatrix& scores);
/// Fraction of prompts with any score >= threshold. DomainError unless
/// threshold lies in (0, 1).
double toxicity_probability(const ScoreMatrix& scores, double threshold);

/// Draws `samples_per_prompt` outputs per prompt. Sample j of prompt i uses the
/// stream derive_seed(decoder.seed, {i, j}), so results do not depend on
/// thread count or evaluation order.
SampleMatrix sample_outputs(const SequencePolicy& policy, std::span<const TokenSeq> prompts,
                            std::size_t samples_per_prompt, const DecoderSpec& decoder);
ScoreMatrix toxicity_matrix(const SampleMatrix& samples, const TokenSet& toxic);

double avg_max_toxicity(const SequencePolicy& policy, std::span<const TokenSeq> prompts, std::size_t samples_per_prompt,
                        const DecoderSpec& decoder, const TokenSet& toxic);
double toxicity_probability(const SequencePolicy& policy, std::span<const TokenSeq> prompts,
                            std::size_t samples_per_prompt, double threshold, const DecoderSpec& decoder,
                            const TokenSet& toxic);

/// Distinct n-grams over all outputs divided by their total token count, EOS
/// excluded. 0 when there are no tokens. DomainError for n = 0.
double dist_n(std::span<const TokenSeq> outputs, std::size_t n);
double dist_n(const SampleMatrix& samples, std::size_t n);

struct ConstraintInstance {
  TokenSeq prompt;
  TokenSeq keywords;
};

/// Mean ordered coverage of one sample per instance (instance i uses stream
/// derive_seed(decoder.seed, {i})). EmptyEvalSet for no instances.
double coverage_rate(const SequencePolicy& policy, std::span<const ConstraintInstance> instances,
                     const DecoderSpec& decoder);

/// exp(-sum log p / token count) of `samples` (scored as given) under
/// `reference`; 1 when there are no tokens.
double perplexity(const PolicyHandle& reference, std::span<const TokenSeq> prompts, const SampleMatrix& samples);

struct ToxicityReport {
  double avg_max_toxicity = 0.0;
  double toxicity_probability = 0.0;
  double dist_1 = 0.0;
  double dist_2 = 0.0;
  double dist_3 = 0.0;
  double perplexity = 0.0;
};

ToxicityReport evaluate_toxicity(const SequencePolicy& policy, std::span<const TokenSeq> prompts,
                                 std::size_t samples_per_prompt, double threshold, const DecoderSpec& decoder,
                                 const TokenSet& toxic, const PolicyHandle& reference);

}  // namespace ipa
