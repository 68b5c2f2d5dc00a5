// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "ipa/checkpoint.hpp"
#include "ipa/decoding.hpp"
#include "ipa/policy.hpp"
#include "ipa/tasks.hpp"
#include "test_support.hpp"

using namespace ipa;
using ipa::testing::tiny_config;
using ipa::testing::tiny_policy;

namespace {

// "ab ab ab ..." windows, each starting at a different phase.
std::vector<TokenSeq> periodic_corpus(const Vocab& vocab, std::size_t count, std::size_t length) {
  const std::string unit = "ab ";
  std::vector<TokenSeq> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::string text;
    for (std::size_t j = 0; j < length; ++j) text += unit[(i + j) % unit.size()];
    TokenSeq seq{Vocab::kBos};
    for (TokenId t : vocab.encode(text)) seq.push_back(t);
    out.push_back(seq);
  }
  return out;
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "ipa_lm_policy_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_SUITE("vocab") {
  TEST_CASE("layout: specials first, then a contiguous control block, then symbols") {
    const Vocab v = Vocab::from_alphabet("xyz", 3);
    CHECK(v.size() == 4 + 3 + 3);
    CHECK(v.token(Vocab::kBos) == "<bos>");
    CHECK(v.is_special(Vocab::kEos));
    CHECK(v.control_ids() == std::vector<TokenId>{4, 5, 6});
    for (int k = 0; k < 3; ++k) CHECK(v.is_control(v.control_token(k)));
    CHECK_FALSE(v.is_control(v.first_symbol()));
    CHECK(v.id_of("x") == 7);
    CHECK_THROWS_AS(v.id_of("q"), IndexError);
    CHECK_THROWS(v.control_token(3));
  }

  TEST_CASE("encode and decode round-trip alphabet text; unknown characters become UNK") {
    const Vocab v = Vocab::from_alphabet("abc", 1);
    CHECK(v.decode(v.encode("cab")) == "cab");
    CHECK(v.encode("aq") == TokenSeq{v.id_of("a"), Vocab::kUnk});
  }

  TEST_CASE("strip_eos removes one trailing EOS only") {
    CHECK(strip_eos(TokenSeq{5, 6, Vocab::kEos}) == TokenSeq{5, 6});
    CHECK(strip_eos(TokenSeq{5, Vocab::kEos, 6}) == TokenSeq{5, Vocab::kEos, 6});
    CHECK(strip_eos(TokenSeq{}).empty());
  }

  TEST_CASE("role names") {
    CHECK(parse_role("approximate") == Role::kApproximate);
    CHECK(role_name(Role::kAdapter) == "adapter");
    CHECK_THROWS_AS(parse_role("critic"), ConfigError);
  }
}

TEST_SUITE("forward_logits") {
  const Vocab vocab = Vocab::from_alphabet("abcdefgh", 2);

  TEST_CASE("same context twice gives bit-identical logits") {
    const PolicyHandle h = tiny_policy(vocab, 4);
    const TokenSeq ctx{0, 8, 9, 10};
    CHECK(forward_logits(h, ctx) == forward_logits(h, ctx));
    // Same seed, fresh model: identical too.
    CHECK(forward_logits(tiny_policy(vocab, 4), ctx) == forward_logits(h, ctx));
  }

  TEST_CASE("causality: later tokens never change earlier positions") {
    const PolicyHandle h = tiny_policy(vocab, 8, Role::kBase, tiny_config(16, 2, 2, 12), 0.3);
    Rng rng(1);
    for (int trial = 0; trial < 30; ++trial) {
      TokenSeq ctx(2 + rng.index(10));
      for (TokenId& t : ctx) t = static_cast<TokenId>(rng.index(vocab.size()));
      const std::size_t j = 1 + rng.index(ctx.size() - 1);
      TokenSeq perturbed = ctx;
      perturbed[j] = static_cast<TokenId>((perturbed[j] + 1) % static_cast<TokenId>(vocab.size()));
      const Tensor<float> a = h.model().logits_all(ctx);
      const Tensor<float> b = h.model().logits_all(perturbed);
      for (std::size_t i = 0; i < j; ++i) {
        for (std::size_t c = 0; c < vocab.size(); ++c) CHECK(a.at(i, c) == b.at(i, c));
      }
      bool changed = false;
      for (std::size_t c = 0; c < vocab.size(); ++c) changed = changed || a.at(j, c) != b.at(j, c);
      CHECK(changed);
    }
  }

  TEST_CASE("appending a token leaves the earlier rows untouched") {
    const PolicyHandle h = tiny_policy(vocab, 3);
    const TokenSeq ctx{0, 8, 9};
    TokenSeq longer = ctx;
    longer.push_back(11);
    const Tensor<float> a = h.model().logits_all(ctx);
    const Tensor<float> b = h.model().logits_all(longer);
    for (std::size_t i = 0; i < ctx.size(); ++i) {
      for (std::size_t c = 0; c < vocab.size(); ++c) CHECK(a.at(i, c) == b.at(i, c));
    }
  }

  TEST_CASE("fresh small-weight models are close to uniform") {
    Rng rng(7);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const PolicyHandle h = tiny_policy(vocab, seed, Role::kBase, tiny_config(32, 2, 2, 16));
      TokenSeq ctx(1 + rng.index(16));
      for (TokenId& t : ctx) t = static_cast<TokenId>(rng.index(vocab.size()));
      const double h_max = std::log(static_cast<double>(vocab.size()));
      CHECK(next_token_dist(h, ctx).entropy() > 0.9 * h_max);
    }
  }

  TEST_CASE("bad contexts") {
    const PolicyHandle h = tiny_policy(vocab, 1, Role::kBase, tiny_config(8, 2, 1, 4));
    CHECK_THROWS_AS(forward_logits(h, TokenSeq{}), ContextOverflow);
    CHECK_THROWS_AS(forward_logits(h, TokenSeq{0, 8, 8, 8, 8}), ContextOverflow);
    CHECK_THROWS_AS(forward_logits(h, TokenSeq{0, 99}), IndexError);
    CHECK_THROWS_AS(forward_logits(h, TokenSeq{-1}), IndexError);
  }
}

TEST_SUITE("next_token_dist") {
  const Vocab vocab = Vocab::from_alphabet("abcdefgh", 2);

  TEST_CASE("temperature 1 is the plain softmax of the logits") {
    const PolicyHandle h = tiny_policy(vocab, 5, Role::kBase, tiny_config(), 0.5);
    const TokenSeq ctx{0, 9, 12};
    const auto ref = ipa::testing::ref_softmax(forward_logits(h, ctx));
    const Distribution d = next_token_dist(h, ctx, 1.0);
    CHECK(ipa::testing::linf(d.probs(), ref) < 1e-12);
    CHECK(std::abs(d.sum() - 1.0) < 1e-6);
  }

  TEST_CASE("huge temperature flattens the distribution") {
    const PolicyHandle h = tiny_policy(vocab, 5, Role::kBase, tiny_config(), 1.0);
    const Distribution d = next_token_dist(h, TokenSeq{0, 9}, 1e6);
    const auto [lo, hi] = std::minmax_element(d.probs().begin(), d.probs().end());
    CHECK(*hi - *lo < 1e-3);
  }

  TEST_CASE("non-positive temperature is a DomainError") {
    const PolicyHandle h = tiny_policy(vocab, 5);
    CHECK_THROWS_AS(next_token_dist(h, TokenSeq{0}, 0.0), DomainError);
    CHECK_THROWS_AS(next_token_dist(h, TokenSeq{0}, -1.0), DomainError);
    CHECK_THROWS_AS(LmPolicy(h, 0.0), DomainError);
  }

  TEST_CASE("distributions are normalised and non-negative for random models and contexts") {
    Rng rng(12);
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
      const PolicyHandle h = tiny_policy(vocab, seed, Role::kBase, tiny_config(), 0.02 + 0.2 * rng.uniform());
      TokenSeq ctx(1 + rng.index(12));
      for (TokenId& t : ctx) t = static_cast<TokenId>(rng.index(vocab.size()));
      const Distribution d = next_token_dist(h, ctx, 0.2 + 3.0 * rng.uniform());
      CHECK(std::abs(d.sum() - 1.0) < 1e-6);
      for (double p : d.probs()) CHECK(p >= 0.0);
    }
  }

  TEST_CASE("the untailored policy never proposes control tokens") {
    const PolicyHandle h = tiny_policy(vocab, 2, Role::kBase, tiny_config(), 1.0);
    const LmPolicy policy(h);
    const Distribution d = policy.next_dist(TokenSeq{0, 9}, TokenSeq{});
    for (TokenId c : vocab.control_ids()) CHECK(d[static_cast<std::size_t>(c)] == 0.0);
    CHECK(std::abs(d.sum() - 1.0) < 1e-9);
  }
}

TEST_SUITE("sequence_logprob") {
  const Vocab vocab = Vocab::from_alphabet("abcdefgh", 2);

  TEST_CASE("empty output scores zero") {
    const PolicyHandle h = tiny_policy(vocab, 1);
    CHECK(sequence_logprob(h, TokenSeq{0}, TokenSeq{}) == 0.0);
  }

  TEST_CASE("single token equals the log of the next-token probability") {
    const PolicyHandle h = tiny_policy(vocab, 1, Role::kBase, tiny_config(), 0.5);
    const TokenSeq prompt{0, 8};
    const Distribution d = next_token_dist(h, prompt);
    CHECK(sequence_logprob(h, prompt, TokenSeq{10}) == doctest::Approx(std::log(d[10])).epsilon(1e-6));
  }

  TEST_CASE("matches the step-by-step product for outputs up to length 8") {
    Rng rng(4);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const PolicyHandle h = tiny_policy(vocab, seed, Role::kBase, tiny_config(), 0.4);
      TokenSeq prompt{0};
      for (std::size_t i = 0, n = rng.index(3); i < n; ++i) prompt.push_back(static_cast<TokenId>(6 + rng.index(8)));
      TokenSeq output(1 + rng.index(8));
      for (TokenId& t : output) t = static_cast<TokenId>(rng.index(vocab.size()));
      double product = 1.0;
      TokenSeq ctx = prompt;
      for (TokenId t : output) {
        product *= ipa::testing::ref_softmax(forward_logits(h, ctx))[static_cast<std::size_t>(t)];
        ctx.push_back(t);
      }
      CHECK(std::abs(std::exp(sequence_logprob(h, prompt, output)) - product) < 1e-6);
    }
  }

  TEST_CASE("context limit counts |prompt| + |output| - 1 tokens") {
    const PolicyHandle h = tiny_policy(vocab, 1, Role::kBase, tiny_config(8, 2, 1, 4));
    CHECK_NOTHROW(sequence_logprob(h, TokenSeq{0, 8}, TokenSeq{8, 9, 10}));
    CHECK_THROWS_AS(sequence_logprob(h, TokenSeq{0, 8}, TokenSeq{8, 9, 10, 11}), ContextOverflow);
  }
}

TEST_SUITE("train_mle") {
  TEST_CASE("held-out NLL on the synthetic Markov corpus drops by at least 20%") {
    SyntheticCorpusSpec spec;
    spec.num_sequences = 400;
    const Corpus corpus = gen_corpus(spec, 3);
    const ToxicityTask task = make_toxicity_task(spec, corpus, 2, 4);
    PolicyHandle h = tiny_policy(task.vocab, 1, Role::kBase, tiny_config(16, 2, 1, 24));
    MleConfig cfg;
    cfg.steps = 150;
    cfg.seed = 2;
    const MleResult r = train_mle(h, as_mle_examples(task.train), cfg);
    CHECK(r.final_heldout_nll <= 0.8 * r.initial_heldout_nll);
    CHECK(r.loss_curve.size() == 150);
  }

  TEST_CASE("a single repeated sequence is memorised") {
    const Vocab vocab = Vocab::from_alphabet("abcdefgh", 0);
    TokenSeq seq{Vocab::kBos};
    for (TokenId t : vocab.encode("hgfedcba")) seq.push_back(t);
    seq.push_back(Vocab::kEos);
    const std::vector<TokenSeq> corpus(32, seq);
    PolicyHandle h = tiny_policy(vocab, 3, Role::kBase, tiny_config(16, 2, 1, 12));
    MleConfig cfg;
    cfg.steps = 300;
    cfg.learning_rate = 1e-2;
    const MleResult r = train_mle(h, as_mle_examples(corpus), cfg);
    CHECK(r.final_heldout_nll < 0.05);
  }

  TEST_CASE("periodic text: after 'ab a' the model predicts 'b' with probability above 0.9") {
    const Vocab vocab = Vocab::from_alphabet("ab ", 0);
    PolicyHandle h = tiny_policy(vocab, 6, Role::kBase, tiny_config(16, 2, 1, 16));
    MleConfig cfg;
    cfg.steps = 300;
    cfg.learning_rate = 1e-2;
    train_mle(h, as_mle_examples(periodic_corpus(vocab, 30, 12)), cfg);
    TokenSeq ctx{Vocab::kBos};
    for (TokenId t : vocab.encode("ab a")) ctx.push_back(t);
    const Distribution d = next_token_dist(h, ctx);
    CHECK(d.argmax() == static_cast<std::size_t>(vocab.id_of("b")));
    CHECK(d[static_cast<std::size_t>(vocab.id_of("b"))] > 0.9);
    // Greedy decoding reproduces the training pattern.
    const TokenSeq out = sample_sequence(LmPolicy(h), ctx, DecoderSpec::greedy(6));
    CHECK(vocab.decode(out) == "b ab a");
  }

  TEST_CASE("zero steps leave parameters unchanged") {
    const Vocab vocab = Vocab::from_alphabet("abc", 0);
    PolicyHandle h = tiny_policy(vocab, 2);
    const std::string before = ipa::testing::checkpoint_bytes(h);
    MleConfig cfg;
    cfg.steps = 0;
    const MleResult r = train_mle(h, as_mle_examples(std::vector<TokenSeq>{{0, 4, 5, 1}, {0, 5, 6, 1}}), cfg);
    CHECK(ipa::testing::checkpoint_bytes(h) == before);
    CHECK(r.loss_curve.empty());
    CHECK(r.final_heldout_nll == r.initial_heldout_nll);
  }

  TEST_CASE("two disjoint corpora: each model fits its own corpus better") {
    const Vocab vocab = Vocab::from_alphabet("abcdwxyz", 0);
    auto corpus_of = [&](const std::string& alphabet, std::uint64_t seed) {
      Rng rng(seed);
      std::vector<TokenSeq> out;
      for (int i = 0; i < 60; ++i) {
        TokenSeq s{Vocab::kBos};
        char c = alphabet[rng.index(alphabet.size())];
        for (int j = 0; j < 10; ++j) {
          s.push_back(vocab.id_of(std::string(1, c)));
          c = alphabet[(alphabet.find(c) + 1 + rng.index(2)) % alphabet.size()];
        }
        s.push_back(Vocab::kEos);
        out.push_back(s);
      }
      return as_mle_examples(out);
    };
    const auto left = corpus_of("abcd", 1), right = corpus_of("wxyz", 2);
    PolicyHandle a = tiny_policy(vocab, 10, Role::kBase, tiny_config(16, 2, 1, 16));
    PolicyHandle b = tiny_policy(vocab, 11, Role::kBase, tiny_config(16, 2, 1, 16));
    MleConfig cfg;
    cfg.steps = 120;
    train_mle(a, left, cfg);
    train_mle(b, right, cfg);
    CHECK(mean_nll(a, left) < mean_nll(b, left));
    CHECK(mean_nll(b, right) < mean_nll(a, right));
  }

  TEST_CASE("frozen handles refuse training and stay byte-identical") {
    const Vocab vocab = Vocab::from_alphabet("abc", 0);
    PolicyHandle h = tiny_policy(vocab, 2);
    h.freeze();
    const std::string before = ipa::testing::checkpoint_bytes(h);
    CHECK_THROWS_AS(train_mle(h, as_mle_examples(std::vector<TokenSeq>{{0, 4, 1}}), MleConfig{}), FrozenPolicyError);
    CHECK_THROWS_AS(batch_gradients(h, 1, 1.0,
                                    [](Tape<float>& tape, std::span<const Var<float>>, std::size_t) {
                                      return tape.constant(Tensor<float>::scalar(0.0f));
                                    }),
                    FrozenPolicyError);
    CHECK(ipa::testing::checkpoint_bytes(h) == before);
  }

  TEST_CASE("over-long training sequences are rejected") {
    const Vocab vocab = Vocab::from_alphabet("abc", 0);
    PolicyHandle h = tiny_policy(vocab, 2, Role::kBase, tiny_config(8, 2, 1, 3));
    CHECK_THROWS_AS(train_mle(h, as_mle_examples(std::vector<TokenSeq>{{0, 4, 5, 6, 1}}), MleConfig{}),
                    ContextOverflow);
  }

  TEST_CASE("gradient maps are keyed by the trained model only") {
    const Vocab vocab = Vocab::from_alphabet("abc", 0);
    const PolicyHandle h = tiny_policy(vocab, 2);
    const ModelConfig mc = h.config();
    const LossResult r = batch_gradients(h, 3, 3.0, [&](Tape<float>&, std::span<const Var<float>> w, std::size_t i) {
      const TokenSeq ctx{0, static_cast<TokenId>(4 + i)};
      return ops::sum(transformer_logits<float>(mc, w, ctx));
    });
    CHECK(r.grads.size() == 1);
    CHECK(r.grads.count(h.uid()) == 1);
    CHECK(r.grads.at(h.uid()).size() == h.model().params().size());
  }

  TEST_CASE("warmup schedule is linear then constant") {
    CHECK(warmup_learning_rate(1.0, 0, 4) == doctest::Approx(0.25));
    CHECK(warmup_learning_rate(1.0, 3, 4) == doctest::Approx(1.0));
    CHECK(warmup_learning_rate(1.0, 10, 4) == 1.0);
    CHECK(warmup_learning_rate(0.5, 0, 0) == 0.5);
  }
}

TEST_SUITE("checkpoint") {
  const Vocab vocab = Vocab::from_alphabet("abcdef", 3);

  TEST_CASE("save then load is bit-exact, metadata included") {
    PolicyHandle h = tiny_policy(vocab, 9, Role::kAdapter, tiny_config(8, 2, 2, 10), 0.7);
    const auto path = scratch("roundtrip.ckpt");
    const Metadata meta{{"recipe.digest", "0123abcd"}, {"note", "with = sign\tand tab"}};
    save_checkpoint(h, path, meta);
    const LoadedCheckpoint loaded = load_checkpoint(path);
    CHECK(loaded.metadata == meta);
    CHECK(loaded.handle.role() == Role::kAdapter);
    CHECK(loaded.handle.config() == h.config());
    CHECK(loaded.handle.vocab() == vocab);
    const auto a = h.model().params(), b = loaded.handle.model().params();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(std::memcmp(a[i].data().data(), b[i].data().data(), a[i].numel() * sizeof(float)) == 0);
    }
    CHECK(serialize_checkpoint(loaded.handle, meta) == serialize_checkpoint(h, meta));
    CHECK(policy_digest(loaded.handle) == policy_digest(h));
  }

  TEST_CASE("the file starts with the magic and a little-endian version") {
    const std::string bytes = serialize_checkpoint(tiny_policy(vocab, 1));
    CHECK(bytes.substr(0, 4) == "IPA1");
    CHECK(static_cast<unsigned char>(bytes[4]) == (kCheckpointVersion & 0xff));
    CHECK(static_cast<unsigned char>(bytes[5]) == (kCheckpointVersion >> 8));
  }

  TEST_CASE("corrupt, truncated or future-version files are FormatErrors") {
    const std::string good = serialize_checkpoint(tiny_policy(vocab, 1));
    std::string magic = good;
    magic[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(magic), FormatError);
    std::string version = good;
    version[4] = static_cast<char>(99);
    CHECK_THROWS_AS(deserialize_checkpoint(version), FormatError);
    for (std::size_t cut : {std::size_t{2}, std::size_t{7}, good.size() / 2, good.size() - 1}) {
      CHECK_THROWS_AS(deserialize_checkpoint(std::string_view(good).substr(0, cut)), FormatError);
    }
    CHECK_THROWS_AS(deserialize_checkpoint(good + "x"), FormatError);
    CHECK_THROWS_AS(load_checkpoint(scratch("missing.ckpt")), ConfigError);
  }

  TEST_CASE("loading into a different width is a ConfigMismatch") {
    const PolicyHandle h = tiny_policy(vocab, 1, Role::kBase, tiny_config(8));
    const auto path = scratch("width.ckpt");
    save_checkpoint(h, path);
    ModelConfig wider = h.config();
    CHECK_NOTHROW(load_checkpoint(path, wider));
    wider.width = 16;
    CHECK_THROWS_AS(load_checkpoint(path, wider), ConfigMismatch);
    std::vector<Tensor<float>> params(h.model().params().begin(), h.model().params().end());
    ModelConfig mismatched = h.config();
    mismatched.width = 16;
    CHECK_THROWS_AS(LanguageModel(mismatched, vocab, params), ConfigMismatch);
  }

  TEST_CASE("digests differ when any parameter changes") {
    PolicyHandle h = tiny_policy(vocab, 1);
    const std::string d0 = policy_digest(h);
    h.model().params()[0][0] += 1.0f;
    CHECK(policy_digest(h) != d0);
    CHECK(digest_hex("") == "cbf29ce484222325");
  }
}
