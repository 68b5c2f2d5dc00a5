// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ipa/metrics.hpp"
#include "ipa/rewards.hpp"
#include "test_support.hpp"

using namespace ipa;
using ipa::testing::tiny_config;
using ipa::testing::tiny_policy;

namespace {

const Vocab& vocab() {
  static const Vocab v = Vocab::from_alphabet("abtxyz", 2);
  return v;
}

TokenSeq enc(std::string_view s) { return vocab().encode(s); }

TokenSet toxic_t() { return {vocab().id_of("t")}; }

// Subsequence test by brute force over index subsets (short inputs only).
bool brute_subsequence(const TokenSeq& y, const TokenSeq& k) {
  const std::size_t n = y.size();
  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    TokenSeq picked;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask >> i & 1) picked.push_back(y[i]);
    }
    if (picked == k) return true;
  }
  return false;
}

FunctionPolicy fixed_output(const TokenSeq& out) {
  return FunctionPolicy(vocab(), [out](auto, std::span<const TokenId> gen) {
    const TokenId next = gen.size() < out.size() ? out[gen.size()] : Vocab::kEos;
    return Distribution::one_hot(vocab().size(), next);
  });
}

}  // namespace

TEST_SUITE("toxicity reward") {
  TEST_CASE("hand examples") {
    CHECK(toxicity_score(enc("tatb"), toxic_t()) == 0.5);
    CHECK(toxicity_reward(enc("tatb"), toxic_t()) == 0.5);
    CHECK(toxicity_score({}, toxic_t()) == 0.0);
    CHECK(toxicity_reward({}, toxic_t()) == 1.0);
    TokenSeq with_eos = enc("tt");
    with_eos.push_back(Vocab::kEos);
    CHECK(toxicity_score(with_eos, toxic_t()) == 1.0);
  }

  TEST_CASE("score and reward sum to one; both in [0, 1]") {
    Rng rng(1);
    for (int trial = 0; trial < 10000; ++trial) {
      TokenSeq y(rng.index(12));
      for (TokenId& id : y) id = static_cast<TokenId>(vocab().first_symbol() + rng.index(6));
      std::size_t count = 0;
      for (TokenId id : y) count += id == vocab().id_of("t");
      const double s = toxicity_score(y, toxic_t());
      CHECK(s + toxicity_reward(y, toxic_t()) == doctest::Approx(1.0));
      CHECK(s == (y.empty() ? 0.0 : static_cast<double>(count) / static_cast<double>(y.size())));
    }
  }

  TEST_CASE("spec rejects special and control tokens") {
    CHECK_THROWS_AS(toxicity_reward_spec(vocab(), {Vocab::kEos}), ConfigError);
    CHECK_THROWS_AS(toxicity_reward_spec(vocab(), {vocab().control_token(0)}), ConfigError);
    const RewardSpec spec = toxicity_reward_spec(vocab(), toxic_t());
    CHECK(spec(TokenSeq{}, enc("ta")) == 0.5);
  }
}

TEST_SUITE("ordered coverage") {
  TEST_CASE("hand examples") {
    CHECK(ordered_coverage(enc("xaybz"), enc("ab")) == 1.0);
    CHECK(ordered_coverage(enc("ba"), enc("ab")) == 0.0);
    CHECK(ordered_coverage(enc("a"), enc("ab")) == 0.0);
    CHECK(ordered_coverage(enc("aab"), enc("aa")) == 1.0);
    CHECK(ordered_coverage(enc("ab"), enc("aa")) == 0.0);
    CHECK_THROWS_AS(ordered_coverage(enc("ab"), TokenSeq{}), DomainError);
  }

  TEST_CASE("agrees with brute-force subsequence search") {
    Rng rng(2);
    for (int trial = 0; trial < 2000; ++trial) {
      TokenSeq y(rng.index(9)), k(1 + rng.index(3));
      for (TokenId& id : y) id = static_cast<TokenId>(vocab().first_symbol() + rng.index(3));
      for (TokenId& id : k) id = static_cast<TokenId>(vocab().first_symbol() + rng.index(3));
      CHECK(ordered_coverage(y, k) == (brute_subsequence(y, k) ? 1.0 : 0.0));
    }
  }

  TEST_CASE("inserting tokens never loses coverage") {
    Rng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
      TokenSeq y(rng.index(8)), k(1 + rng.index(3));
      for (TokenId& id : y) id = static_cast<TokenId>(vocab().first_symbol() + rng.index(3));
      for (TokenId& id : k) id = static_cast<TokenId>(vocab().first_symbol() + rng.index(3));
      TokenSeq longer = y;
      const auto at = longer.begin() + static_cast<std::ptrdiff_t>(rng.index(y.size() + 1));
      longer.insert(at, static_cast<TokenId>(vocab().first_symbol() + rng.index(3)));
      CHECK(ordered_coverage(longer, k) >= ordered_coverage(y, k));
    }
  }
}

TEST_SUITE("fluency") {
  const PolicyHandle ref = tiny_policy(vocab(), 4, Role::kBase, tiny_config(8, 2, 1, 16), 0.5);
  const TokenSeq prompt{Vocab::kBos, vocab().id_of("a")};

  TEST_CASE("empty output is perfectly fluent") { CHECK(fluency_proxy(ref, prompt, {}) == 1.0); }

  TEST_CASE("geometric mean of token probabilities") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      TokenSeq y(1 + rng.index(6));
      for (TokenId& id : y) id = static_cast<TokenId>(vocab().first_symbol() + rng.index(6));
      const double expected = std::exp(sequence_logprob(ref, prompt, y) / static_cast<double>(y.size()));
      const double f = fluency_proxy(ref, prompt, y);
      CHECK(f == doctest::Approx(expected).epsilon(1e-9));
      CHECK((f > 0.0 && f <= 1.0));
    }
  }

  TEST_CASE("greedy outputs are at least as fluent as random ones") {
    const LmPolicy lm(ref);
    Rng rng(6);
    std::size_t wins = 0;
    for (int trial = 0; trial < 100; ++trial) {
      TokenSeq p{Vocab::kBos, static_cast<TokenId>(vocab().first_symbol() + rng.index(6))};
      const TokenSeq greedy = sample_sequence(lm, p, DecoderSpec::greedy(1));
      const TokenSeq random{static_cast<TokenId>(vocab().first_symbol() + rng.index(6))};
      wins += fluency_proxy(ref, p, greedy) >= fluency_proxy(ref, p, random);
    }
    CHECK(wins == 100);
  }

  TEST_CASE("spec is bounded") {
    const RewardSpec spec = fluency_reward_spec(ref);
    CHECK(spec(prompt, enc("ab")) <= 1.0);
  }
}

TEST_SUITE("composite reward") {
  const auto constant = [](double v) {
    return RewardSpec{"c", [v](auto, auto) { return v; }};
  };

  TEST_CASE("product of components") {
    const std::vector<RewardSpec> parts{constant(0.5), constant(0.5)};
    CHECK(product_reward(parts, {}, {}) == 0.25);
    const CompositeReward c(parts);
    CHECK(c({}, {}) == 0.25);
    CHECK(c.as_spec().name == "c*c");
    CHECK(c.as_spec()({}, {}) == 0.25);
    CHECK(product_reward(std::vector<RewardSpec>{constant(0.0), constant(0.9)}, {}, {}) == 0.0);
    CHECK(product_reward(std::vector<RewardSpec>{constant(0.37)}, {}, {}) == 0.37);
  }

  TEST_CASE("out-of-range components are CodomainErrors") {
    CHECK_THROWS_AS(product_reward(std::vector<RewardSpec>{constant(1.5)}, {}, {}), CodomainError);
    CHECK_THROWS_AS(product_reward(std::vector<RewardSpec>{constant(-0.1)}, {}, {}), CodomainError);
    CHECK_THROWS_AS(constant(std::nan(""))({}, {}), CodomainError);
  }

  TEST_CASE("product stays in [0, 1] and matches the oracle") {
    Rng rng(7);
    for (int trial = 0; trial < 10000; ++trial) {
      std::vector<RewardSpec> parts;
      double expected = 1.0;
      for (std::size_t i = 0, n = 1 + rng.index(4); i < n; ++i) {
        const double v = rng.uniform();
        parts.push_back(constant(v));
        expected *= v;
      }
      const double r = product_reward(parts, {}, {});
      CHECK((r >= 0.0 && r <= 1.0));
      CHECK(r == doctest::Approx(expected).epsilon(1e-12));
    }
  }

  TEST_CASE("coverage spec reads keywords from the prompt") {
    const RewardSpec spec = coverage_reward_spec([](std::span<const TokenId> p) { return TokenSeq(p.begin() + 1, p.end()); });
    TokenSeq prompt{Vocab::kBos};
    for (TokenId id : enc("ab")) prompt.push_back(id);
    CHECK(spec(prompt, enc("xab")) == 1.0);
    CHECK(spec(prompt, enc("bx")) == 0.0);
  }
}

TEST_SUITE("toxicity metrics") {
  TEST_CASE("hand values") {
    CHECK(avg_max_toxicity(ScoreMatrix{{0.2, 0.6}}) == 0.6);
    const ScoreMatrix two{{0.6, 0.1}, {0.2, 0.0}};
    CHECK(avg_max_toxicity(two) == doctest::Approx(0.4));
    CHECK(toxicity_probability(two, 0.5) == 0.5);
    CHECK(toxicity_probability(ScoreMatrix{{0.5}}, 0.5) == 1.0);
  }

  TEST_CASE("errors") {
    CHECK_THROWS_AS(avg_max_toxicity(ScoreMatrix{}), EmptyEvalSet);
    CHECK_THROWS_AS(toxicity_probability(ScoreMatrix{}, 0.5), EmptyEvalSet);
    CHECK_THROWS_AS(avg_max_toxicity(ScoreMatrix{{}}), DomainError);
    CHECK_THROWS_AS(toxicity_probability(ScoreMatrix{{0.1}}, 1.0), DomainError);
    CHECK_THROWS_AS(toxicity_probability(ScoreMatrix{{0.1}}, 0.0), DomainError);
  }

  TEST_CASE("metric bounds and monotonicity in the threshold") {
    Rng rng(8);
    for (int trial = 0; trial < 500; ++trial) {
      ScoreMatrix m(1 + rng.index(5));
      for (auto& row : m) {
        row.resize(1 + rng.index(5));
        for (double& v : row) v = rng.uniform();
      }
      const double amt = avg_max_toxicity(m);
      CHECK((amt >= 0.0 && amt <= 1.0));
      CHECK(toxicity_probability(m, 0.3) >= toxicity_probability(m, 0.7));
    }
  }

  TEST_CASE("policy overloads on a scripted policy") {
    const FunctionPolicy clean = fixed_output(enc("ab"));
    const FunctionPolicy dirty = fixed_output(enc("tt"));
    const std::vector<TokenSeq> prompts(3, TokenSeq{Vocab::kBos});
    const DecoderSpec dec = DecoderSpec::nucleus(0.9, 4, 1);
    CHECK(avg_max_toxicity(clean, prompts, 2, dec, toxic_t()) == 0.0);
    CHECK(avg_max_toxicity(dirty, prompts, 2, dec, toxic_t()) == 1.0);
    CHECK(toxicity_probability(dirty, prompts, 2, 0.5, dec, toxic_t()) == 1.0);
  }

  TEST_CASE("sampling is deterministic and independent of thread count") {
    const PolicyHandle p = tiny_policy(vocab(), 9, Role::kBase, tiny_config(8, 2, 1, 16), 0.5);
    const LmPolicy lm(p);
    const std::vector<TokenSeq> prompts(4, TokenSeq{Vocab::kBos});
    const DecoderSpec dec = DecoderSpec::nucleus(0.9, 6, 3);
    const SampleMatrix a = sample_outputs(lm, prompts, 3, dec);
    CHECK(a == sample_outputs(lm, prompts, 3, dec));
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        Rng rng(derive_seed(dec.seed, {i, j}));
        CHECK(a[i][j] == sample_sequence(lm, prompts[i], dec, rng));
      }
    }
  }
}

TEST_SUITE("dist_n") {
  TEST_CASE("hand values") {
    const std::vector<TokenSeq> outs{enc("abab")};
    CHECK(dist_n(outs, 1) == 0.5);
    CHECK(dist_n(outs, 2) == 0.5);  // {ab, ba} over 4 tokens
    CHECK(dist_n(std::vector<TokenSeq>{}, 1) == 0.0);
    CHECK_THROWS_AS(dist_n(outs, 0), DomainError);
    TokenSeq with_eos = enc("ab");
    with_eos.push_back(Vocab::kEos);
    CHECK(dist_n(std::vector<TokenSeq>{with_eos}, 1) == 1.0);
  }

  TEST_CASE("invariant under reordering outputs") {
    Rng rng(10);
    for (int trial = 0; trial < 300; ++trial) {
      std::vector<TokenSeq> outs(1 + rng.index(5));
      for (auto& y : outs) {
        y.resize(rng.index(7));
        for (TokenId& id : y) id = static_cast<TokenId>(vocab().first_symbol() + rng.index(4));
      }
      std::vector<TokenSeq> shuffled = outs;
      std::shuffle(shuffled.begin(), shuffled.end(), rng.engine());
      for (std::size_t n = 1; n <= 3; ++n) {
        const double d = dist_n(outs, n);
        CHECK(d == dist_n(shuffled, n));
        CHECK((d >= 0.0 && d <= 1.0));
      }
    }
  }
}

TEST_SUITE("coverage and perplexity") {
  TEST_CASE("coverage rate over scripted instances") {
    const FunctionPolicy lm = fixed_output(enc("ab"));
    const std::vector<ConstraintInstance> inst{{TokenSeq{Vocab::kBos}, enc("ab")}, {TokenSeq{Vocab::kBos}, enc("ba")}};
    CHECK(coverage_rate(lm, inst, DecoderSpec::greedy(4)) == 0.5);
    CHECK_THROWS_AS(coverage_rate(lm, std::vector<ConstraintInstance>{}, DecoderSpec::greedy(4)), EmptyEvalSet);
  }

  TEST_CASE("perplexity is the inverse geometric mean") {
    const PolicyHandle ref = tiny_policy(vocab(), 11, Role::kBase, tiny_config(8, 2, 1, 16), 0.5);
    const std::vector<TokenSeq> prompts{TokenSeq{Vocab::kBos}, TokenSeq{Vocab::kBos, vocab().id_of("a")}};
    const SampleMatrix samples{{enc("ab"), enc("t")}, {enc("xyz")}};
    double lp = 0.0;
    lp += sequence_logprob(ref, prompts[0], samples[0][0]) + sequence_logprob(ref, prompts[0], samples[0][1]);
    lp += sequence_logprob(ref, prompts[1], samples[1][0]);
    CHECK(perplexity(ref, prompts, samples) == doctest::Approx(std::exp(-lp / 6.0)).epsilon(1e-9));
    CHECK(perplexity(ref, prompts, SampleMatrix{{}, {}}) == 1.0);
  }
}
