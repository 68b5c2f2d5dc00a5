// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "ipa/distill.hpp"
#include "ipa/tasks.hpp"
#include "test_support.hpp"

using namespace ipa;
using ipa::testing::checkpoint_bytes;
using ipa::testing::tiny_config;
using ipa::testing::tiny_policy;

namespace {

const Vocab& vocab() {
  static const Vocab v = Vocab::from_alphabet("abcde", 2);
  return v;
}

PolicyHandle frozen_teacher(std::uint64_t seed, double init_std = 0.5) {
  PolicyHandle t = tiny_policy(vocab(), seed, Role::kBase, tiny_config(8, 2, 1, 16), init_std);
  t.freeze();
  return t;
}

std::vector<TokenSeq> prompts(std::size_t n) {
  std::vector<TokenSeq> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({Vocab::kBos, static_cast<TokenId>(vocab().first_symbol() + static_cast<TokenId>(i % 5))});
  }
  return out;
}

// Periodic teacher: trained on "abcde" repeated, so its greedy path is known.
struct Periodic {
  PolicyHandle teacher;
  std::vector<TokenSeq> prompts;
};

const Periodic& periodic() {
  static const Periodic p = [] {
    SyntheticCorpusSpec spec;
    spec.grammar = Grammar::kPeriodic;
    spec.alphabet = "abcde";
    spec.toxic = "";
    spec.injection_rate = 0.0;
    spec.num_sequences = 300;
    spec.min_length = 10;
    spec.max_length = 12;
    const Corpus corpus = gen_corpus(spec, 1);
    PolicyHandle teacher = PolicyHandle::create(tiny_config(16, 2, 1, 16), vocab(), Role::kBase, 2);
    MleConfig mle;
    mle.steps = 300;
    mle.learning_rate = 1e-2;
    train_mle(teacher, as_mle_examples(encode_corpus(vocab(), corpus.train)), mle);
    teacher.freeze();
    return Periodic{teacher, make_prompts(vocab(), corpus.val, 2)};
  }();
  return p;
}

}  // namespace

TEST_SUITE("kd corpus") {
  TEST_CASE("zero samples per prompt is an empty corpus") {
    const KDCorpus c = generate_kd_corpus(frozen_teacher(1), prompts(4), 0, kd_decoder(6, 0));
    CHECK(c.pairs.empty());
    CHECK(c.teacher_digest == policy_digest(frozen_teacher(1)));
  }

  TEST_CASE("deterministic, control-free and within the teacher's nucleus") {
    const PolicyHandle t = frozen_teacher(2);
    const DecoderSpec dec = kd_decoder(6, 9);
    const KDCorpus a = generate_kd_corpus(t, prompts(5), 3, dec);
    CHECK(a == generate_kd_corpus(t, prompts(5), 3, dec));
    REQUIRE(a.pairs.size() == 15);
    const LmPolicy lm(t);
    for (const KdPair& pair : a.pairs) {
      CHECK((!pair.output.empty() && pair.output.size() <= 6));
      for (std::size_t s = 0; s < pair.output.size(); ++s) {
        const std::span<const TokenId> gen(pair.output.data(), s);
        const Distribution kept = apply_decoder(lm.next_dist(pair.prompt, gen), dec);
        CHECK(kept[static_cast<std::size_t>(pair.output[s])] > 0.0);
        CHECK_FALSE(vocab().is_control(pair.output[s]));
      }
    }
    // Pair (i, j) follows its own stream.
    Rng rng(derive_seed(dec.seed, {1, 2}));
    CHECK(a.pairs[5].output == sample_sequence(lm, a.pairs[5].prompt, dec, rng));
  }

  TEST_CASE("an unfrozen teacher is refused and generation leaves it untouched") {
    PolicyHandle t = tiny_policy(vocab(), 3);
    CHECK_THROWS_AS(generate_kd_corpus(t, prompts(2), 1, kd_decoder(4, 0)), StateError);
    t.freeze();
    const std::string before = checkpoint_bytes(t);
    generate_kd_corpus(t, prompts(3), 2, kd_decoder(4, 0));
    CHECK(checkpoint_bytes(t) == before);
  }

  TEST_CASE("jsonl round trip and malformed input") {
    KDCorpus c = generate_kd_corpus(frozen_teacher(4), prompts(3), 2, kd_decoder(5, 1));
    c.recipe_digest = "abc123";
    const std::string text = c.to_jsonl();
    CHECK(KDCorpus::from_jsonl(text) == c);
    CHECK(std::count(text.begin(), text.end(), '\n') == 7);
    CHECK_THROWS_AS(KDCorpus::from_jsonl(""), FormatError);
    CHECK_THROWS_AS(KDCorpus::from_jsonl("{\"kind\":\"other\"}\n"), FormatError);
    CHECK_THROWS_AS(KDCorpus::from_jsonl(text.substr(0, text.size() / 2)), FormatError);
  }
}

TEST_SUITE("fit_approximate") {
  TEST_CASE("zero steps only relabels and freezes") {
    const KDCorpus c = generate_kd_corpus(frozen_teacher(5), prompts(3), 2, kd_decoder(5, 1));
    PolicyHandle student = tiny_policy(vocab(), 6);
    const auto params = student.model().params();
    const std::vector<Tensor<float>> before(params.begin(), params.end());
    MleConfig mle;
    mle.steps = 0;
    fit_approximate(student, c, mle);
    CHECK(student.role() == Role::kApproximate);
    CHECK(student.frozen());
    for (std::size_t p = 0; p < before.size(); ++p) CHECK(student.model().params()[p] == before[p]);
  }

  TEST_CASE("vocabulary mismatch") {
    const KDCorpus c = generate_kd_corpus(frozen_teacher(5), prompts(3), 1, kd_decoder(5, 1));
    PolicyHandle other = tiny_policy(Vocab::from_alphabet("xyz", 2), 7);
    CHECK_THROWS_AS(fit_approximate(other, c, MleConfig{}), ConfigMismatch);
  }
}

TEST_SUITE("kd gap") {
  TEST_CASE("identical policies have zero gap; gaps are non-negative") {
    const PolicyHandle t = frozen_teacher(8);
    CHECK(std::abs(eval_kd_gap(t, t, prompts(5), 4, kd_decoder(8, 0))) < 1e-12);
    for (std::uint64_t seed = 9; seed < 14; ++seed) {
      CHECK(eval_kd_gap(t, frozen_teacher(seed), prompts(5), 4, kd_decoder(8, 0)) >= 0.0);
    }
    CHECK_THROWS_AS(eval_kd_gap(t, t, prompts(5), 0, kd_decoder(8, 0)), DomainError);
    CHECK_THROWS_AS(eval_kd_gap(t, t, std::vector<TokenSeq>{}, 3, kd_decoder(8, 0)), EmptyEvalSet);
  }

  TEST_CASE("distillation from a periodic teacher closes the gap and copies greedy paths") {
    const Periodic& p = periodic();
    const KDCorpus corpus = generate_kd_corpus(p.teacher, p.prompts, 4, kd_decoder(10, 3));
    PolicyHandle student = PolicyHandle::create(tiny_config(16, 2, 1, 16), vocab(), Role::kBase, 4);
    const double untrained = eval_kd_gap(p.teacher, student, p.prompts, 8, kd_decoder(8, 5));
    MleConfig mle;
    mle.steps = 300;
    mle.learning_rate = 1e-2;
    fit_approximate(student, corpus, mle);
    const double trained = eval_kd_gap(p.teacher, student, p.prompts, 8, kd_decoder(8, 5));
    INFO("gap before " << untrained << " after " << trained);
    CHECK(trained < untrained);
    const LmPolicy tl(p.teacher), sl(student);
    std::size_t match = 0, total = 0;
    for (const TokenSeq& prompt : p.prompts) {
      const TokenSeq a = sample_sequence(tl, prompt, DecoderSpec::greedy(8));
      const TokenSeq b = sample_sequence(sl, prompt, DecoderSpec::greedy(8));
      for (std::size_t i = 0; i < a.size(); ++i) match += i < b.size() && a[i] == b[i];
      total += a.size();
    }
    CHECK(static_cast<double>(match) / static_cast<double>(total) >= 0.95);
  }

  TEST_CASE("a 4x larger distillation corpus does not widen the gap (3-seed median)") {
    const Periodic& p = periodic();
    std::vector<double> small, large;
    for (std::uint64_t seed : {1, 2, 3}) {
      for (std::size_t n : {1, 4}) {
        const KDCorpus corpus = generate_kd_corpus(p.teacher, p.prompts, n, kd_decoder(10, 10 + seed));
        PolicyHandle student = PolicyHandle::create(tiny_config(16, 2, 1, 16), vocab(), Role::kBase, 20 + seed);
        MleConfig mle;
        mle.steps = 150;
        mle.learning_rate = 1e-2;
        mle.seed = seed;
        fit_approximate(student, corpus, mle);
        (n == 1 ? small : large).push_back(eval_kd_gap(p.teacher, student, p.prompts, 8, kd_decoder(8, 5)));
      }
    }
    const double m1 = ipa::testing::median(small), m4 = ipa::testing::median(large);
    INFO("1x median " << m1 << " 4x median " << m4);
    CHECK(m4 <= m1);
  }

  TEST_CASE("the gap falls across 25% snapshots, one inversion allowed (3-seed median)") {
    const Periodic& p = periodic();
    constexpr std::size_t kSteps = 200;
    std::vector<std::vector<double>> per_snapshot(5);
    for (std::uint64_t seed : {1, 2, 3}) {
      const KDCorpus corpus = generate_kd_corpus(p.teacher, p.prompts, 4, kd_decoder(10, 30 + seed));
      PolicyHandle student = PolicyHandle::create(tiny_config(16, 2, 1, 16), vocab(), Role::kBase, 40 + seed);
      per_snapshot[0].push_back(eval_kd_gap(p.teacher, student, p.prompts, 8, kd_decoder(8, 5)));
      MleConfig mle;
      mle.steps = kSteps;
      mle.learning_rate = 1e-2;
      mle.seed = seed;
      mle.on_step = [&](std::size_t done) {
        if (done % (kSteps / 4) == 0) {
          per_snapshot[done / (kSteps / 4)].push_back(eval_kd_gap(p.teacher, student, p.prompts, 8, kd_decoder(8, 5)));
        }
      };
      fit_approximate(student, corpus, mle);
    }
    std::vector<double> medians;
    for (const auto& snap : per_snapshot) {
      REQUIRE(snap.size() == 3);
      medians.push_back(ipa::testing::median(snap));
    }
    std::size_t inversions = 0;
    for (std::size_t i = 1; i < medians.size(); ++i) inversions += medians[i] > medians[i - 1];
    INFO("median gaps " << medians[0] << " " << medians[1] << " " << medians[2] << " " << medians[3] << " " << medians[4]);
    CHECK(inversions <= 1);
    CHECK(medians.back() < medians.front());
  }
}
