// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "ipa/checkpoint.hpp"
#include "ipa/tailoring.hpp"
#include "test_support.hpp"

using namespace ipa;
using ipa::testing::linf;
using ipa::testing::random_probs;
using ipa::testing::ref_drop;
using ipa::testing::ref_product;
using ipa::testing::ref_softmax;
using ipa::testing::tiny_config;
using ipa::testing::tiny_policy;

namespace {

// Adapter whose every parameter is zero: all logits are 0, so after control
// masking it is uniform over the remaining tokens.
PolicyHandle uniform_adapter(const Vocab& vocab, ModelConfig config = tiny_config()) {
  PolicyHandle h = tiny_policy(vocab, 0, Role::kAdapter, config);
  for (Tensor<float>& p : h.model().params()) p.fill(0.0f);
  return h;
}

// Tailored next-token distribution built from raw logits, independently of
// the library's fusion path.
std::vector<double> oracle_step(const TailoredPolicy& t, const TokenSeq& prompt, const TokenSeq& generated) {
  const Vocab& v = t.vocab();
  TokenSeq bctx = prompt;
  bctx.insert(bctx.end(), generated.begin(), generated.end());
  TokenSeq actx;
  if (t.control_token()) actx.push_back(*t.control_token());
  actx.insert(actx.end(), bctx.begin(), bctx.end());
  const auto base = ref_softmax(t.base().model().logits_last(bctx), t.temperatures().base);
  const auto adapter = ref_drop(ref_softmax(t.adapter().model().logits_last(actx), t.temperatures().adapter), v.control_ids());
  return ref_product(base, adapter);
}

}  // namespace

TEST_SUITE("product_of_experts") {
  TEST_CASE("hand-computed example") {
    const Distribution out = product_of_experts(Distribution({0.5, 0.3, 0.2}), Distribution({0.2, 0.3, 0.5}));
    // products 0.10, 0.09, 0.10; Z = 0.29
    CHECK(out[0] == doctest::Approx(0.10 / 0.29).epsilon(1e-12));
    CHECK(out[1] == doctest::Approx(0.09 / 0.29).epsilon(1e-12));
    CHECK(out[2] == doctest::Approx(0.10 / 0.29).epsilon(1e-12));
    CHECK(std::abs(out[0] - 0.34483) < 5e-6);
    CHECK(std::abs(out[1] - 0.31034) < 5e-6);
  }

  TEST_CASE("a uniform expert is the identity") {
    Rng rng(1);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t n = 2 + rng.index(40);
      const Distribution base(random_probs(rng, n, 0.2));
      const Distribution out = product_of_experts(base, Distribution::uniform(n));
      CHECK(linf(out.probs(), base.probs()) < 1e-9);
    }
  }

  TEST_CASE("a one-hot adapter selects its token") {
    const Distribution out = product_of_experts(Distribution({0.2, 0.5, 0.3}), Distribution::one_hot(3, 2));
    CHECK(out.probs()[2] == 1.0);
    CHECK(out.probs()[0] == 0.0);
    const Distribution same = product_of_experts(Distribution::one_hot(4, 1), Distribution::one_hot(4, 1));
    CHECK(same.probs()[1] == 1.0);
  }

  TEST_CASE("symmetric in its arguments") {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = 2 + rng.index(30);
      const Distribution a(random_probs(rng, n, 0.1)), b(random_probs(rng, n, 0.1));
      bool overlap = false;
      for (std::size_t i = 0; i < n; ++i) overlap = overlap || (a[i] > 0 && b[i] > 0);
      if (!overlap) continue;
      CHECK(linf(product_of_experts(a, b).probs(), product_of_experts(b, a).probs()) < 1e-15);
    }
  }

  TEST_CASE("matches multiply-then-normalise on random pairs") {
    Rng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = 1 + rng.index(64);
      const auto a = random_probs(rng, n, 0.1), b = random_probs(rng, n);
      const Distribution out = product_of_experts(Distribution(a), Distribution(b));
      CHECK(linf(out.probs(), ref_product(a, b)) < 1e-9);
      CHECK(std::abs(out.sum() - 1.0) < 1e-9);
    }
  }

  TEST_CASE("disjoint supports raise DegenerateProduct") {
    CHECK_THROWS_AS(product_of_experts(Distribution({1.0, 0.0}), Distribution({0.0, 1.0})), DegenerateProduct);
    // Z = 2e-32, below the floor; 2e-29 is above it.
    CHECK_THROWS_AS(product_of_experts(Distribution({1.0, 1e-32}), Distribution({1e-32, 1.0})), DegenerateProduct);
    CHECK_NOTHROW(product_of_experts(Distribution({1.0, 1e-29}), Distribution({1e-29, 1.0})));
    CHECK_THROWS_AS(product_of_experts(Distribution({0.5, 0.5}), Distribution({0.2, 0.3, 0.5})), DomainError);
  }

  TEST_CASE("tiny entries stay finite and normalised") {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = 2 + rng.index(20);
      std::vector<double> a(n), b(n);
      for (std::size_t i = 0; i < n; ++i) {
        a[i] = rng.bernoulli(0.5) ? 1e-30 : rng.uniform();
        b[i] = rng.bernoulli(0.5) ? 1e-30 : rng.uniform();
      }
      a[0] = b[0] = 1.0;  // keep Z above the degenerate floor
      const Distribution out = product_of_experts(Distribution::normalized(a), Distribution::normalized(b));
      for (double p : out.probs()) CHECK(std::isfinite(p));
      CHECK(std::abs(out.sum() - 1.0) < 1e-9);
    }
  }

  TEST_CASE("log-space form keeps -inf for excluded tokens") {
    const double ninf = -std::numeric_limits<double>::infinity();
    const std::vector<double> a{std::log(0.5), std::log(0.5), ninf};
    const std::vector<double> b{std::log(0.25), std::log(0.25), std::log(0.5)};
    const auto out = product_of_experts_log(a, b);
    CHECK(out[0] == doctest::Approx(std::log(0.5)));
    CHECK(out[2] == ninf);
  }
}

TEST_SUITE("tailored policy") {
  const Vocab vocab = Vocab::from_alphabet("abcdef", 3);

  TEST_CASE("construction freezes the base and checks compatibility") {
    PolicyHandle base = tiny_policy(vocab, 1);
    CHECK_FALSE(base.frozen());
    const TailoredPolicy t(base, tiny_policy(vocab, 2, Role::kAdapter));
    CHECK(base.frozen());
    CHECK_FALSE(t.adapter().frozen());
    const Vocab other = Vocab::from_alphabet("abcdeg", 3);
    CHECK_THROWS_AS(TailoredPolicy(base, tiny_policy(other, 2, Role::kAdapter)), ConfigMismatch);
    CHECK_THROWS_AS(TailoredPolicy(base, tiny_policy(vocab, 2), vocab.id_of("a")), DomainError);
    CHECK_THROWS_AS(TailoredPolicy(base, tiny_policy(vocab, 2), std::nullopt, SideTemperatures{0.0, 1.0}), DomainError);
  }

  TEST_CASE("a fresh adapter barely moves the base distribution") {
    // Desk-scale shapes: the toxicity task vocabulary, a 32-wide base and a
    // 16-wide adapter, both at the default std-0.02 initialisation.
    const Vocab desk = Vocab::from_alphabet("abcdefghijklXY", 5);
    const PolicyHandle base = tiny_policy(desk, 1, Role::kBase, tiny_config(32, 2, 2, 24));
    const TailoredPolicy t(base, tiny_policy(desk, 2, Role::kAdapter, tiny_config(16, 2, 1, 24)));
    Rng rng(5);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      TokenSeq prompt(1 + rng.index(10));
      for (TokenId& id : prompt) id = static_cast<TokenId>(desk.first_symbol() + rng.index(14));
      const auto base_dist = ref_drop(ref_softmax(forward_logits(base, prompt)), desk.control_ids());
      worst = std::max(worst, linf(t.next_dist(prompt, {}).probs(), base_dist));
    }
    INFO("worst L-inf deviation " << worst);
    CHECK(worst < 0.02);
  }

  TEST_CASE("uniform adapter: tailored equals the control-free base and keeps its argmax") {
    const PolicyHandle base = tiny_policy(vocab, 4, Role::kBase, tiny_config(16, 2, 2, 16), 0.5);
    const TailoredPolicy t(base, uniform_adapter(vocab, tiny_config(8, 2, 1, 16)), vocab.control_token(1));
    Rng rng(6);
    for (int trial = 0; trial < 100; ++trial) {
      TokenSeq prompt(1 + rng.index(12));
      for (TokenId& id : prompt) id = static_cast<TokenId>(rng.index(vocab.size()));
      const auto expected = ref_drop(ref_softmax(forward_logits(base, prompt)), vocab.control_ids());
      const Distribution got = tailored_next_dist(t, prompt, {});
      CHECK(linf(got.probs(), expected) < 1e-9);
      CHECK(got.argmax() == Distribution(expected).argmax());
    }
  }

  TEST_CASE("uniform adapter: sequence log-probability equals the base's") {
    const Vocab plain = Vocab::from_alphabet("abcdef", 0);
    const PolicyHandle base = tiny_policy(plain, 4, Role::kBase, tiny_config(), 0.4);
    const TailoredPolicy t(base, uniform_adapter(plain));
    const TokenSeq prompt{0, 5};
    const TokenSeq output{6, 7, 5, 1};
    CHECK(tailored_sequence_logprob(t, prompt, output) ==
          doctest::Approx(sequence_logprob(base, prompt, output)).epsilon(1e-6));
    CHECK(tailored_sequence_logprob(t, prompt, TokenSeq{}) == 0.0);
  }

  TEST_CASE("control tokens change the adapter side only and are never proposed") {
    const PolicyHandle base = tiny_policy(vocab, 1, Role::kBase, tiny_config(), 0.3);
    const PolicyHandle adapter = tiny_policy(vocab, 2, Role::kAdapter, tiny_config(), 0.3);
    const TailoredPolicy plain(base, adapter);
    const TailoredPolicy conditioned(base, adapter, vocab.control_token(2));
    const TokenSeq prompt{0, 8, 9};
    const TokenSeq generated{10};
    const StepLogProbs a = plain.next_log_probs(prompt, generated);
    const StepLogProbs b = conditioned.next_log_probs(prompt, generated);
    CHECK(a.base == b.base);
    CHECK(a.adapter != b.adapter);
    CHECK(conditioned.base_context(prompt, generated) == TokenSeq{0, 8, 9, 10});
    CHECK(conditioned.adapter_context(prompt, generated) == TokenSeq{vocab.control_token(2), 0, 8, 9, 10});
    const Distribution d = conditioned.next_dist(prompt, generated);
    for (TokenId c : vocab.control_ids()) CHECK(d[static_cast<std::size_t>(c)] == 0.0);
  }

  TEST_CASE("per-side temperatures apply before the product") {
    const PolicyHandle base = tiny_policy(vocab, 1, Role::kBase, tiny_config(), 0.5);
    const PolicyHandle adapter = tiny_policy(vocab, 2, Role::kAdapter, tiny_config(), 0.5);
    const TailoredPolicy t(base, adapter, vocab.control_token(0), SideTemperatures{2.0, 0.5});
    const TokenSeq prompt{0, 11, 12};
    CHECK(linf(t.next_dist(prompt, {}).probs(), oracle_step(t, prompt, {})) < 1e-9);
  }

  TEST_CASE("exhaustive oracle on |V| = 8, horizon 3") {
    const Vocab v8 = Vocab::from_alphabet("abc", 1);
    REQUIRE(v8.size() == 8);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const PolicyHandle base = tiny_policy(v8, 100 + seed, Role::kBase, tiny_config(8, 2, 1, 8), 0.5);
      const PolicyHandle adapter = tiny_policy(v8, 200 + seed, Role::kAdapter, tiny_config(8, 2, 1, 8), 0.5);
      const TailoredPolicy t(base, adapter, v8.control_token(0));
      const TokenSeq prompt{Vocab::kBos, 5};
      double total = 0.0, worst = 0.0;
      for (TokenId y0 = 0; y0 < 8; ++y0) {
        for (TokenId y1 = 0; y1 < 8; ++y1) {
          for (TokenId y2 = 0; y2 < 8; ++y2) {
            const TokenSeq y{y0, y1, y2};
            double p = 1.0;
            for (std::size_t s = 0; s < 3; ++s) {
              p *= oracle_step(t, prompt, TokenSeq(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(s)))[y[s]];
            }
            total += p;
            worst = std::max(worst, std::abs(std::exp(tailored_sequence_logprob(t, prompt, y)) - p));
          }
        }
      }
      CHECK(worst < 1e-9);
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }

  TEST_CASE("two-step enumeration over the smallest vocabulary") {
    // One symbol plus the four specials: |V| = 5, 25 two-token sequences.
    const Vocab v5 = Vocab::from_alphabet("a", 0);
    const PolicyHandle base = tiny_policy(v5, 7, Role::kBase, tiny_config(8, 2, 1, 6), 0.8);
    const PolicyHandle adapter = tiny_policy(v5, 8, Role::kAdapter, tiny_config(8, 2, 1, 6), 0.8);
    const TailoredPolicy t(base, adapter);
    const TokenSeq prompt{Vocab::kBos};
    double total = 0.0;
    for (TokenId a = 0; a < 5; ++a) {
      const auto p0 = ref_product(ref_softmax(base.model().logits_last(prompt)),
                                  ref_softmax(adapter.model().logits_last(prompt)));
      const TokenSeq ctx{Vocab::kBos, a};
      const auto p1 = ref_product(ref_softmax(base.model().logits_last(ctx)), ref_softmax(adapter.model().logits_last(ctx)));
      for (TokenId b = 0; b < 5; ++b) {
        const double expected = p0[a] * p1[b];
        total += expected;
        CHECK(std::abs(std::exp(tailored_sequence_logprob(t, prompt, TokenSeq{a, b})) - expected) < 1e-9);
      }
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
  }

  TEST_CASE("scoring path agrees with step-by-step decoding") {
    const PolicyHandle base = tiny_policy(vocab, 31, Role::kBase, tiny_config(), 0.4);
    const TailoredPolicy t(base, tiny_policy(vocab, 32, Role::kAdapter, tiny_config(), 0.4), vocab.control_token(1));
    const TokenSeq prompt{0, 8};
    const TokenSeq output{9, 10, 11, 1};
    const auto steps = t.score(prompt, output);
    REQUIRE(steps.size() == output.size());
    for (std::size_t s = 0; s < output.size(); ++s) {
      const auto step = t.next_log_probs(prompt, TokenSeq(output.begin(), output.begin() + static_cast<std::ptrdiff_t>(s)));
      CHECK(linf(steps[s].tailored, step.tailored) < 1e-6);
      CHECK(linf(steps[s].base, step.base) < 1e-6);
    }
  }

  TEST_CASE("context overflow propagates from either side") {
    const PolicyHandle base = tiny_policy(vocab, 1, Role::kBase, tiny_config(8, 2, 1, 4));
    const TailoredPolicy t(base, tiny_policy(vocab, 2, Role::kAdapter, tiny_config(8, 2, 1, 4)), vocab.control_token(0));
    // Base window fits (4 tokens), adapter window does not (5 with the control).
    CHECK_THROWS_AS(t.next_dist(TokenSeq{0, 8, 9, 10}, {}), ContextOverflow);
    CHECK_NOTHROW(t.next_dist(TokenSeq{0, 8, 9}, {}));
  }
}

TEST_SUITE("variants") {
  const Vocab vocab = Vocab::from_alphabet("abcdef", 2);

  TEST_CASE("direct: the deployment base must be the training base") {
    const PolicyHandle base = tiny_policy(vocab, 1);
    const PolicyHandle adapter = tiny_policy(vocab, 2, Role::kAdapter);
    const TailoredPolicy t = assemble_variant(IpaVariant{VariantTag::kDirect, base}, base, adapter, vocab.control_token(1));
    REQUIRE(t.manifest());
    CHECK(t.manifest()->base_digest == t.manifest()->training_base_digest);
    CHECK(t.manifest()->adapter_digest == policy_digest(adapter));
    CHECK(t.manifest()->control_token == vocab.control_token(1));
    CHECK_THROWS_AS(assemble_variant(IpaVariant{VariantTag::kDirect, tiny_policy(vocab, 9)}, base, adapter),
                    ConfigMismatch);
  }

  TEST_CASE("transfer: base-side distributions come from the deployment base") {
    const PolicyHandle small = tiny_policy(vocab, 1, Role::kBase, tiny_config(8), 0.5);
    const PolicyHandle large = tiny_policy(vocab, 2, Role::kBase, tiny_config(16), 0.5);
    const PolicyHandle adapter = tiny_policy(vocab, 3, Role::kAdapter);
    const TailoredPolicy t = assemble_variant(IpaVariant{VariantTag::kTransfer, small}, large, adapter);
    const TokenSeq prompt{0, 7, 8};
    CHECK(linf(t.next_log_probs(prompt, {}).base, log_softmax(forward_logits(large, prompt))) == 0.0);
    CHECK(t.manifest()->base_digest == policy_digest(large));
    CHECK(t.manifest()->training_base_digest == policy_digest(small));
    CHECK(t.manifest()->tag == VariantTag::kTransfer);
    CHECK_THROWS_AS(assemble_variant(IpaVariant{VariantTag::kTransfer, large}, large, adapter), ConfigMismatch);
  }

  TEST_CASE("distilled: the training base must be an approximate policy") {
    const PolicyHandle teacher = tiny_policy(vocab, 1);
    PolicyHandle student = tiny_policy(vocab, 2);
    const PolicyHandle adapter = tiny_policy(vocab, 3, Role::kAdapter);
    CHECK_THROWS_AS(assemble_variant(IpaVariant{VariantTag::kDistilled, student}, teacher, adapter), ConfigMismatch);
    student.set_role(Role::kApproximate);
    const TailoredPolicy t = assemble_variant(IpaVariant{VariantTag::kDistilled, student}, teacher, adapter);
    CHECK(t.manifest()->training_base_digest == policy_digest(student));
    CHECK(t.manifest()->base_digest == policy_digest(teacher));
  }

  TEST_CASE("vocabulary mismatch is a ConfigMismatch") {
    const Vocab other = Vocab::from_alphabet("uvwxyz", 2);
    const PolicyHandle base = tiny_policy(vocab, 1);
    CHECK_THROWS_AS(assemble_variant(IpaVariant{VariantTag::kDirect, base}, base, tiny_policy(other, 3, Role::kAdapter)),
                    ConfigMismatch);
    CHECK_THROWS_AS(assemble_variant(IpaVariant{VariantTag::kDirect, PolicyHandle{}}, base, tiny_policy(vocab, 3)),
                    ConfigMismatch);
  }

  TEST_CASE("manifest survives checkpoint metadata") {
    const VariantManifest m{VariantTag::kDistilled, "aa", "bb", "cc", TokenId{5}};
    CHECK(VariantManifest::from_metadata(m.to_metadata()) == m);
    VariantManifest none = m;
    none.control_token.reset();
    CHECK(VariantManifest::from_metadata(none.to_metadata()) == none);
    CHECK_THROWS_AS(VariantManifest::from_metadata(Metadata{}), FormatError);
    CHECK(parse_variant("transfer") == VariantTag::kTransfer);
    CHECK_THROWS_AS(parse_variant("ipa*"), ConfigError);
  }
}
