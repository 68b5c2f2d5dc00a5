// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "ipa/decoding.hpp"
#include "ipa/autograd.hpp"
#include "ipa/rl.hpp"
#include "ipa/tailoring.hpp"

namespace {

using namespace ipa;

Tensor<float> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t({r, c});
  for (float& v : t.data()) v = static_cast<float>(rng.normal(0.0, 1.0));
  return t;
}

const Vocab& vocab() {
  static const Vocab v = Vocab::from_alphabet("abcdefghijklXY", 5);
  return v;
}

PolicyHandle model(std::size_t width, std::size_t layers, Role role, std::uint64_t seed) {
  ModelConfig c;
  c.width = width;
  c.layers = layers;
  c.context = 24;
  return PolicyHandle::create(c, vocab(), role, seed);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tape<float> tape;
  const auto a = tape.constant(random_matrix(n, n, 1));
  const auto b = tape.constant(random_matrix(n, n, 2));
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b).value().data().data());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(32)->Arg(64)->Arg(128);

void BM_Forward(benchmark::State& state) {
  const PolicyHandle p = model(static_cast<std::size_t>(state.range(0)), 2, Role::kBase, 3);
  TokenSeq ctx{Vocab::kBos};
  for (TokenId id : vocab().encode("abcabcabcabcabcabc")) ctx.push_back(id);
  for (auto _ : state) benchmark::DoNotOptimize(p.model().logits_all(ctx).data().data());
}
BENCHMARK(BM_Forward)->Arg(16)->Arg(32);

void BM_TailoredNextDist(benchmark::State& state) {
  const PolicyHandle base = model(32, 2, Role::kBase, 4);
  const PolicyHandle adapter = model(16, 1, Role::kAdapter, 5);
  const TailoredPolicy t(base, adapter, vocab().control_token(4));
  const TokenSeq prompt{Vocab::kBos, vocab().id_of("a"), vocab().id_of("b")};
  const TokenSeq generated = vocab().encode("cdefgh");
  for (auto _ : state) benchmark::DoNotOptimize(t.next_dist(prompt, generated).argmax());
}
BENCHMARK(BM_TailoredNextDist);

void BM_Filters(benchmark::State& state) {
  Rng rng(6);
  std::vector<double> logits(static_cast<std::size_t>(state.range(0)));
  for (double& v : logits) v = rng.normal(0.0, 1.0);
  std::vector<float> f(logits.begin(), logits.end());
  const Distribution d = Distribution::from_logits(f);
  for (auto _ : state) {
    benchmark::DoNotOptimize(nucleus_filter(d, 0.9).argmax());
    benchmark::DoNotOptimize(top_k_filter(d, 8).argmax());
    benchmark::DoNotOptimize(typical_filter(d, 0.9).argmax());
  }
}
BENCHMARK(BM_Filters)->Arg(24)->Arg(256);

void BM_CollectRollouts(benchmark::State& state) {
  const PolicyHandle base = model(32, 2, Role::kBase, 7);
  const PolicyHandle adapter = model(16, 1, Role::kAdapter, 8);
  const TailoredPolicy t(base, adapter);
  const std::vector<TokenSeq> prompts(4, TokenSeq{Vocab::kBos, vocab().id_of("a")});
  for (auto _ : state) {
    benchmark::DoNotOptimize(collect_rollouts(t, prompts, 4, DecoderSpec::nucleus(1.0, 12, 1), false).size());
  }
}
BENCHMARK(BM_CollectRollouts)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
