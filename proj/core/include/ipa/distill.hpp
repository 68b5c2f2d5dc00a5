// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ipa/decoding.hpp"

namespace ipa {

struct KdPair {
  TokenSeq prompt;
  TokenSeq output;
  std::uint64_t seed = 0;  // sampling stream of this output

  friend bool operator==(const KdPair&, const KdPair&) = default;
};

/// Teacher samples plus the provenance needed to regenerate them.
struct KDCorpus {
  std::vector<KdPair> pairs;
  std::string teacher_digest;
  Vocab vocab;
  DecoderSpec decoder;
  std::string recipe_digest;  // producing recipe, when written by a recipe run

  /// First line: provenance header; then one {prompt, output, teacher_digest,
  /// seed} record per pair.
  std::string to_jsonl() const;
  /// FormatError on malformed input.
  static KDCorpus from_jsonl(std::string_view text);

  friend bool operator==(const KDCorpus& a, const KDCorpus& b);
};

/// Default sampling decoder for distillation: nucleus p = 0.9, temperature 1.
DecoderSpec kd_decoder(std::size_t max_length, std::uint64_t seed);

/// `n_per_prompt` control-free teacher samples per prompt; pair (i, j) uses
/// stream derive_seed(decoder.seed, {i, j}). StateError unless the teacher is
/// frozen.
KDCorpus generate_kd_corpus(const PolicyHandle& teacher, std::span<const TokenSeq> prompts, std::size_t n_per_prompt,
                            const DecoderSpec& decoder);

/// MLE of the student on the corpus outputs given their prompts, then relabels
/// the student as an approximate policy and freezes it. ConfigMismatch when
/// vocabularies differ.
MleResult fit_approximate(PolicyHandle& student, const KDCorpus& corpus, const MleConfig& config);

/// Log floor used when the approximate policy rules out a teacher token.
inline constexpr double kKdLogFloor = -30.0;

/// Mean over prompts and steps (t < horizon) of KL(teacher || approximate),
/// teacher-forced on one teacher sample per prompt drawn from `decoder`
/// (max_length replaced by horizon; prompt i uses derive_seed(decoder.seed,
/// {i})). Both sides exclude control tokens. DomainError for horizon 0,
/// EmptyEvalSet for no prompts.
double eval_kd_gap(const PolicyHandle& teacher, const PolicyHandle& approximate, std::span<const TokenSeq> prompts,
                   std::size_t horizon, const DecoderSpec& decoder);

}  // namespace ipa
