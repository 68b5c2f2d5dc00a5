// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipa/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ipa/adam.hpp"
#include "ipa/parallel.hpp"
#include "ipa/rng.hpp"

namespace ipa {

std::string_view role_name(Role role) {
  switch (role) {
    case Role::kBase:
      return "base";
    case Role::kAdapter:
      return "adapter";
    case Role::kApproximate:
      return "approximate";
  }
  return "base";
}

Role parse_role(std::string_view name) {
  if (name == "base") return Role::kBase;
  if (name == "adapter") return Role::kAdapter;
  if (name == "approximate") return Role::kApproximate;
  throw ConfigError("unknown policy role '" + std::string(name) + "'");
}

PolicyHandle::PolicyHandle(std::shared_ptr<LanguageModel> model, Role role, std::uint64_t seed, bool frozen)
    : state_(std::make_shared<State>(State{std::move(model), role, seed, frozen})) {}

PolicyHandle PolicyHandle::create(const ModelConfig& config, const Vocab& vocab, Role role, std::uint64_t seed) {
  ModelConfig c = config;
  c.vocab_size = vocab.size();
  return PolicyHandle(std::make_shared<LanguageModel>(c, vocab, seed), role, seed);
}

LmPolicy::LmPolicy(PolicyHandle handle, double temperature) : handle_(std::move(handle)), temperature_(temperature) {
  if (!(temperature_ > 0.0)) throw DomainError("temperature must be positive");
}

Distribution LmPolicy::next_dist(std::span<const TokenId> prompt, std::span<const TokenId> generated) const {
  TokenSeq context(prompt.begin(), prompt.end());
  context.insert(context.end(), generated.begin(), generated.end());
  return without_control_tokens(next_token_dist(handle_, context, temperature_), handle_.vocab());
}

std::vector<float> forward_logits(const PolicyHandle& handle, std::span<const TokenId> context) {
  return handle.model().logits_last(context);
}

Distribution next_token_dist(const PolicyHandle& handle, std::span<const TokenId> context, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  return Distribution::from_logits(forward_logits(handle, context), temperature);
}

std::vector<std::vector<double>> step_log_probs(const PolicyHandle& handle, std::span<const TokenId> prompt,
                                                std::span<const TokenId> output, double temperature) {
  if (output.empty()) return {};
  if (prompt.empty()) throw ContextOverflow("scoring needs a non-empty prompt");
  TokenSeq context(prompt.begin(), prompt.end());
  context.insert(context.end(), output.begin(), output.end() - 1);
  const Tensor<float> logits = handle.model().logits_all(context);
  std::vector<std::vector<double>> rows;
  rows.reserve(output.size());
  for (std::size_t t = 0; t < output.size(); ++t) {
    rows.push_back(log_softmax(logits.row(prompt.size() - 1 + t), temperature));
  }
  return rows;
}

double sequence_logprob(const PolicyHandle& handle, std::span<const TokenId> prompt, std::span<const TokenId> output,
                        double temperature) {
  const auto rows = step_log_probs(handle, prompt, output, temperature);
  double total = 0.0;
  for (std::size_t t = 0; t < output.size(); ++t) {
    if (!handle.vocab().contains(output[t])) throw IndexError("output token outside vocabulary");
    total += rows[t][static_cast<std::size_t>(output[t])];
  }
  return total;
}

LossResult batch_gradients(const PolicyHandle& handle, std::size_t count, double normalizer,
                           const std::function<Var<float>(Tape<float>&, std::span<const Var<float>>, std::size_t)>& item_loss) {
  if (handle.frozen()) throw FrozenPolicyError("cannot compute gradients for a frozen policy");
  const LanguageModel& model = handle.model();
  std::vector<double> losses(count, 0.0);
  std::vector<std::vector<Tensor<float>>> grads(count);
  parallel_for(count, [&](std::size_t i) {
    Tape<float> tape;
    const std::vector<Var<float>> w = model.bind(tape, true);
    const Var<float> loss = item_loss(tape, w, i);
    losses[i] = static_cast<double>(loss.value().item());
    tape.backward(loss);
    grads[i].reserve(w.size());
    for (const Var<float>& v : w) grads[i].push_back(tape.grad(v));
  });

  LossResult result;
  std::vector<Tensor<float>> total;
  for (const Tensor<float>& p : model.params()) total.emplace_back(p.shape());
  const float inv = static_cast<float>(1.0 / normalizer);
  for (std::size_t i = 0; i < count; ++i) {
    result.loss += losses[i];
    for (std::size_t p = 0; p < total.size(); ++p) {
      auto dst = total[p].data();
      auto src = grads[i][p].data();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j] * inv;
    }
  }
  result.loss /= normalizer;
  result.grads.emplace(model.uid(), std::move(total));
  return result;
}

namespace {

std::size_t target_count(const MleExample& ex) {
  return ex.tokens.size() > ex.target_begin ? ex.tokens.size() - ex.target_begin : 0;
}

// Sum of NLL over the targets of one example.
Var<float> example_nll(Tape<float>&, std::span<const Var<float>> w, const ModelConfig& config, const MleExample& ex) {
  const std::span<const TokenId> context(ex.tokens.data(), ex.tokens.size() - 1);
  const Var<float> logits = transformer_logits<float>(config, w, context);
  const std::size_t first = ex.target_begin - 1;
  const Var<float> rows = ops::slice_rows(logits, first, context.size());
  const std::span<const TokenId> targets(ex.tokens.data() + ex.target_begin, ex.tokens.size() - ex.target_begin);
  return ops::scale(ops::sum(ops::pick(ops::log_softmax(rows), targets)), -1.0f);
}

void check_examples(std::span<const MleExample> corpus, const ModelConfig& config) {
  for (const MleExample& ex : corpus) {
    if (ex.target_begin == 0) throw DomainError("target_begin must be at least 1");
    if (ex.tokens.size() > config.context + 1) {
      throw ContextOverflow("training sequence of " + std::to_string(ex.tokens.size()) +
                            " tokens exceeds context " + std::to_string(config.context));
    }
  }
}

}  // namespace

double mean_nll(const PolicyHandle& handle, std::span<const MleExample> examples) {
  double total = 0.0;
  std::size_t tokens = 0;
  std::vector<double> per(examples.size(), 0.0);
  parallel_for(examples.size(), [&](std::size_t i) {
    const MleExample& ex = examples[i];
    if (target_count(ex) == 0) return;
    const TokenSeq prompt(ex.tokens.begin(), ex.tokens.begin() + static_cast<std::ptrdiff_t>(ex.target_begin));
    const TokenSeq output(ex.tokens.begin() + static_cast<std::ptrdiff_t>(ex.target_begin), ex.tokens.end());
    per[i] = -sequence_logprob(handle, prompt, output);
  });
  for (std::size_t i = 0; i < examples.size(); ++i) {
    total += per[i];
    tokens += target_count(examples[i]);
  }
  return tokens == 0 ? 0.0 : total / static_cast<double>(tokens);
}

double warmup_learning_rate(double base, std::size_t step, std::size_t warmup) {
  if (warmup == 0 || step >= warmup) return base;
  return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

MleResult train_mle(PolicyHandle& handle, std::span<const MleExample> corpus, const MleConfig& config) {
  if (handle.frozen()) throw FrozenPolicyError("train_mle on a frozen policy");
  check_examples(corpus, handle.config());

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(config.seed, {0x4d4c45}));
  std::shuffle(order.begin(), order.end(), rng.engine());
  auto heldout_n = static_cast<std::size_t>(std::floor(config.heldout_fraction * static_cast<double>(corpus.size())));
  if (heldout_n >= corpus.size()) heldout_n = 0;
  std::vector<MleExample> train, heldout;
  for (std::size_t i = 0; i < order.size(); ++i) {
    std::vector<MleExample>& dst = i < heldout_n ? heldout : train;
    if (target_count(corpus[order[i]]) > 0) dst.push_back(corpus[order[i]]);
  }
  const std::vector<MleExample>& eval_set = heldout.empty() ? train : heldout;

  MleResult result;
  result.initial_heldout_nll = mean_nll(handle, eval_set);
  if (config.steps == 0 || train.empty()) {
    result.final_heldout_nll = result.initial_heldout_nll;
    return result;
  }

  LanguageModel& model = handle.model();
  AdamState adam(model.params());
  const ModelConfig mc = model.config();
  std::vector<std::size_t> batch(config.batch_size);
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::size_t tokens = 0;
    for (std::size_t& b : batch) {
      b = rng.index(train.size());
      tokens += target_count(train[b]);
    }
    LossResult lr = batch_gradients(handle, batch.size(), static_cast<double>(tokens),
                                    [&](Tape<float>& tape, std::span<const Var<float>> w, std::size_t i) {
                                      return example_nll(tape, w, mc, train[batch[i]]);
                                    });
    if (!std::isfinite(lr.loss)) throw NumericalError("non-finite MLE loss at step " + std::to_string(step));
    result.loss_curve.push_back(lr.loss);
    adam_step(model.params(), lr.grads.at(model.uid()), adam,
              warmup_learning_rate(config.learning_rate, step, config.warmup_steps));
    if (config.on_step) config.on_step(step + 1);
  }
  result.final_heldout_nll = mean_nll(handle, eval_set);
  return result;
}

std::vector<MleExample> as_mle_examples(std::span<const TokenSeq> sequences) {
  std::vector<MleExample> out;
  out.reserve(sequences.size());
  for (const TokenSeq& s : sequences) out.push_back(MleExample{s, 1});
  return out;
}

}  // namespace ipa
