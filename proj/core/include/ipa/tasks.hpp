// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic corpora and the two built-in task suites: forbidden tokens
// (detoxification) and ordered keywords (constrained generation).

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ipa/metrics.hpp"

namespace ipa {

enum class Grammar { kMarkov, kPeriodic, kKeywords };

std::string_view grammar_name(Grammar g);
Grammar parse_grammar(std::string_view name);

struct SyntheticCorpusSpec {
  Grammar grammar = Grammar::kMarkov;
  std::string alphabet = "abcdefghijkl";
  std::string toxic = "XY";
  /// Probability that any generated position is replaced by a toxic symbol.
  double injection_rate = 0.3;
  /// Successors per symbol in the Markov transition table.
  std::size_t branching = 3;
  /// Pattern repeated by the periodic grammar.
  std::string period = "abcde";
  std::size_t num_sequences = 2000;
  std::size_t min_length = 14;
  std::size_t max_length = 18;
  // Ordered-keyword grammar: "k1 k2 k3 >" then, with probability copy_rate,
  // the cue followed by the keywords in order, then Markov text.
  std::size_t num_keywords = 3;
  double copy_rate = 0.25;
  char separator = '>';
  char cue = '!';
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  double test_fraction = 0.1;

  /// ConfigError on an inconsistent spec.
  void validate() const;
  /// Every symbol the corpus can contain, in vocabulary order.
  std::string symbols() const;
};

struct Corpus {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

Corpus gen_corpus(const SyntheticCorpusSpec& spec, std::uint64_t seed);

/// Writes train/val/test .jsonl files. The first line of each is a header
/// carrying `digest`; each further line is {"text": ...}.
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus, std::string_view digest);
Corpus read_corpus(const std::filesystem::path& dir);

/// Fraction of characters of `texts` drawn from `symbols`.
double symbol_rate(const std::vector<std::string>& texts, std::string_view symbols);

/// BOS + text + EOS, one token per character.
std::vector<TokenSeq> encode_corpus(const Vocab& vocab, const std::vector<std::string>& texts);
/// BOS + the first `length` characters of each text.
std::vector<TokenSeq> make_prompts(const Vocab& vocab, const std::vector<std::string>& texts, std::size_t length);

struct ToxicityTask {
  Vocab vocab;
  TokenSet toxic;
  std::vector<TokenSeq> train;
  std::vector<TokenSeq> val;
  std::vector<TokenSeq> train_prompts;
  std::vector<TokenSeq> test_prompts;
};

ToxicityTask make_toxicity_task(const SyntheticCorpusSpec& spec, const Corpus& corpus, int num_control,
                                std::size_t prompt_length);

struct KeywordTask {
  Vocab vocab;
  std::size_t num_keywords = 3;
  std::vector<TokenSeq> train;
  std::vector<TokenSeq> val;
  std::vector<ConstraintInstance> train_instances;
  std::vector<ConstraintInstance> test_instances;

  /// The keywords encoded in a prompt (tokens 1..num_keywords).
  TokenSeq keywords_of(std::span<const TokenId> prompt) const;
  std::vector<TokenSeq> train_prompts() const;
};

KeywordTask make_keyword_task(const SyntheticCorpusSpec& spec, const Corpus& corpus, int num_control);

/// coverage x fluency under `reference`.
CompositeReward keyword_reward(const KeywordTask& task, const PolicyHandle& reference);

}  // namespace ipa
