// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipa/rl.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "ipa/adam.hpp"
#include "ipa/parallel.hpp"

namespace ipa {

using ops::TokenIndex;

namespace {

constexpr double kSigmaFloor = 1e-6;

// KL between two log-probability rows; entries of p at -inf carry no mass.
double kl_log(std::span<const double> logp, std::span<const double> logq) {
  double kl = 0.0;
  for (std::size_t i = 0; i < logp.size(); ++i) {
    const double p = std::exp(logp[i]);
    if (p == 0.0) continue;
    if (!std::isfinite(logq[i])) throw InfiniteKL("tailored mass on a token the base rules out");
    kl += p * (logp[i] - logq[i]);
  }
  return std::max(kl, 0.0);
}

std::vector<TokenIndex> control_columns(const Vocab& vocab) {
  const std::vector<TokenId> ids = vocab.control_ids();
  return {ids.begin(), ids.end()};
}

template <typename T>
Tensor<T> base_tensor(const Rollout& r, std::size_t vocab_size) {
  if (r.base_rows.size() != r.output.size()) throw StateError("rollout lacks cached base log-probabilities");
  Tensor<T> t(Shape{r.output.size(), vocab_size});
  for (std::size_t s = 0; s < r.output.size(); ++s) {
    if (r.base_rows[s].size() != vocab_size) throw ShapeError("cached base row has the wrong width");
    for (std::size_t c = 0; c < vocab_size; ++c) {
      const double v = r.base_rows[s][c];
      t[s * vocab_size + c] = static_cast<T>(std::isfinite(v) ? v : kMaskedLogit);
    }
  }
  return t;
}

void require_trainable(const TailoredPolicy& policy) {
  if (!policy.base().frozen()) throw StateError("the base policy must be frozen during RL");
  if (policy.adapter().frozen()) throw FrozenPolicyError("the adapter is frozen");
}

std::size_t token_count(std::span<const Rollout> batch) {
  std::size_t n = 0;
  for (const Rollout& r : batch) n += r.output.size();
  return n;
}

}  // namespace

double kl_per_token(const Distribution& tailored, const Distribution& base) {
  if (tailored.size() != base.size()) throw DomainError("kl_per_token: distributions over different vocabularies");
  double kl = 0.0;
  for (std::size_t i = 0; i < tailored.size(); ++i) {
    const double p = tailored[i];
    if (p == 0.0) continue;
    if (base[i] == 0.0) throw InfiniteKL("tailored mass on token " + std::to_string(i) + " where base has none");
    kl += p * (std::log(p) - std::log(base[i]));
  }
  return std::max(kl, 0.0);
}

std::vector<Rollout> collect_rollouts(const TailoredPolicy& policy, std::span<const TokenSeq> prompts,
                                      std::size_t n_per_prompt, const DecoderSpec& decoder,
                                      bool condition_on_best_bin) {
  if (prompts.empty()) throw DomainError("collect_rollouts needs at least one prompt");
  decoder.validate();
  std::optional<TokenId> control = policy.control_token();
  if (condition_on_best_bin) {
    const Vocab& vocab = policy.vocab();
    if (vocab.num_control() == 0) throw ConfigMismatch("vocabulary has no control tokens to condition on");
    control = vocab.control_token(vocab.num_control() - 1);
  }
  const TailoredPolicy sampler = policy.with_control(control);
  std::vector<Rollout> out(prompts.size() * n_per_prompt);
  parallel_for(out.size(), [&](std::size_t k) {
    Rollout& r = out[k];
    r.prompt = prompts[k / n_per_prompt];
    r.seed = derive_seed(decoder.seed, {k});
    r.sampled_control = control;
    Rng rng(r.seed);
    while (r.output.size() < decoder.max_length) {
      StepLogProbs step = sampler.next_log_probs(r.prompt, r.output);
      const Distribution filtered = apply_decoder(Distribution::from_log_probs(step.tailored), decoder);
      const TokenId tok = decoder.kind == DecoderSpec::Kind::kGreedy ? static_cast<TokenId>(filtered.argmax())
                                                                     : sample_token(filtered, rng);
      const auto t = static_cast<std::size_t>(tok);
      r.output.push_back(tok);
      r.tailored_logp.push_back(step.tailored[t]);
      r.base_logp.push_back(step.base[t]);
      r.step_kl.push_back(kl_log(step.tailored, step.base));
      r.base_rows.push_back(std::move(step.base));
      if (tok == Vocab::kEos) break;
    }
  });
  return out;
}

double mean_kl_to_base(const TailoredPolicy& policy, std::span<const TokenSeq> prompts,
                       const std::vector<std::vector<TokenSeq>>& samples) {
  if (prompts.size() != samples.size()) throw ShapeError("mean_kl_to_base: prompt and sample counts differ");
  std::vector<double> kl(prompts.size(), 0.0);
  std::vector<std::size_t> count(prompts.size(), 0);
  parallel_for(prompts.size(), [&](std::size_t i) {
    for (const TokenSeq& y : samples[i]) {
      for (const StepLogProbs& step : policy.score(prompts[i], y)) kl[i] += kl_log(step.tailored, step.base);
      count[i] += y.size();
    }
  });
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < kl.size(); ++i) {
    total += kl[i];
    n += count[i];
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

void score_rollouts(std::span<Rollout> rollouts, const RewardSpec::Fn& reward) {
  parallel_for(rollouts.size(), [&](std::size_t i) {
    double v = 0.0;
    try {
      v = reward(rollouts[i].prompt, rollouts[i].output);
    } catch (const std::exception& e) {
      throw RewardError(std::string("reward function failed: ") + e.what());
    }
    if (!std::isfinite(v)) throw RewardError("reward function returned a non-finite value");
    rollouts[i].reward = v;
  });
}

DataPool::DataPool(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw DomainError("pool capacity must be positive");
}

void DataPool::add(std::vector<Rollout> rollouts) {
  for (Rollout& r : rollouts) {
    items_.push_back(std::move(r));
    if (items_.size() > capacity_) items_.pop_front();
  }
}

bool DataPool::partition(std::size_t k) {
  if (k < 2) throw DomainError("quark_partition needs at least two bins");
  if (items_.empty()) throw StateError("quark_partition on an empty pool");
  const std::size_t n = items_.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return items_[a].reward < items_[b].reward; });
  // Bin sizes: n / k each, with the n % k extras on the top bins.
  const std::size_t base = n / k, extra = n % k;
  std::size_t pos = 0;
  for (std::size_t bin = 0; bin < k; ++bin) {
    const std::size_t size = base + (bin >= k - extra ? 1 : 0);
    for (std::size_t j = 0; j < size; ++j) items_[order[pos++]].bin = bin;
  }
  return n >= k;
}

std::vector<std::size_t> DataPool::histogram(std::size_t k) const {
  std::vector<std::size_t> h(k, 0);
  for (const Rollout& r : items_) {
    if (r.bin && *r.bin < k) ++h[*r.bin];
  }
  return h;
}

bool quark_partition(DataPool& pool, std::size_t k) { return pool.partition(k); }

template <typename T>
Var<T> tailored_log_probs(Tape<T>& tape, const TailoredPolicy& policy, std::span<const Var<T>> w,
                          const Rollout& rollout, std::optional<TokenId> control) {
  const std::size_t n = rollout.output.size();
  if (n == 0) throw DomainError("tailored_log_probs on an empty output");
  if (rollout.prompt.empty()) throw ContextOverflow("scoring needs a non-empty prompt");
  const Vocab& vocab = policy.vocab();
  TokenSeq context;
  if (control) context.push_back(*control);
  context.insert(context.end(), rollout.prompt.begin(), rollout.prompt.end());
  context.insert(context.end(), rollout.output.begin(), rollout.output.end() - 1);
  const std::size_t first = context.size() - n;
  const Var<T> logits = transformer_logits<T>(policy.adapter().config(), w, context);
  Var<T> rows = ops::slice_rows(logits, first, first + n);
  if (policy.temperatures().adapter != 1.0) rows = ops::scale(rows, static_cast<T>(1.0 / policy.temperatures().adapter));
  const std::vector<TokenIndex> controls = control_columns(vocab);
  if (!controls.empty()) rows = ops::mask_cols(rows, std::span<const TokenIndex>(controls));
  const Var<T> base = tape.constant(base_tensor<T>(rollout, vocab.size()));
  return ops::log_softmax(ops::add(rows, base));
}

template <typename T>
Var<T> quark_rollout_loss(Tape<T>& tape, const TailoredPolicy& policy, std::span<const Var<T>> w,
                          const Rollout& rollout, double beta) {
  if (!rollout.bin) throw StateError("rollout has no quantile bin");
  const TokenId control = policy.vocab().control_token(*rollout.bin);
  const Var<T> logp = tailored_log_probs(tape, policy, w, rollout, control);
  const std::vector<TokenIndex> targets(rollout.output.begin(), rollout.output.end());
  const Var<T> nll = ops::scale(ops::sum(ops::pick(logp, std::span<const TokenIndex>(targets))), T(-1));
  if (beta == 0.0) return nll;
  const Var<T> base = tape.constant(base_tensor<T>(rollout, policy.vocab().size()));
  return ops::add(nll, ops::scale(ops::sum(ops::kl_rows(logp, base)), static_cast<T>(beta)));
}

template <typename T>
Var<T> ppo_rollout_loss(Tape<T>& tape, const TailoredPolicy& policy, std::span<const Var<T>> w,
                        const Rollout& rollout, std::span<const double> advantages, double clip) {
  const std::size_t n = rollout.output.size();
  if (rollout.tailored_logp.size() != n) throw StateError("rollout lacks old tailored log-probabilities");
  if (advantages.size() != n) throw ShapeError("one advantage per output token expected");
  const Var<T> logp = tailored_log_probs(tape, policy, w, rollout, policy.control_token());
  const std::vector<TokenIndex> targets(rollout.output.begin(), rollout.output.end());
  Tensor<T> old(Shape{n}), adv(Shape{n});
  for (std::size_t t = 0; t < n; ++t) {
    old[t] = static_cast<T>(rollout.tailored_logp[t]);
    adv[t] = static_cast<T>(advantages[t]);
  }
  const Var<T> a = tape.constant(std::move(adv));
  const Var<T> ratio = ops::exp(ops::sub(ops::pick(logp, std::span<const TokenIndex>(targets)), tape.constant(std::move(old))));
  const Var<T> unclipped = ops::mul(ratio, a);
  const Var<T> clipped = ops::mul(ops::clamp(ratio, static_cast<T>(1.0 - clip), static_cast<T>(1.0 + clip)), a);
  return ops::scale(ops::sum(ops::minimum(unclipped, clipped)), T(-1));
}

std::vector<std::vector<double>> ppo_advantages(std::span<const Rollout> batch, double beta) {
  std::vector<std::vector<double>> g(batch.size());
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Rollout& r = batch[i];
    const std::size_t n = r.output.size();
    if (r.step_kl.size() != n) throw StateError("rollout lacks per-step KL values");
    g[i].assign(n, 0.0);
    double to_go = 0.0;
    for (std::size_t t = n; t-- > 0;) {
      to_go += r.step_kl[t];
      g[i][t] = r.reward - beta * to_go;
      lo = std::min(lo, g[i][t]);
      hi = std::max(hi, g[i][t]);
      sum += g[i][t];
      ++count;
    }
  }
  if (count == 0 || lo == hi) {
    for (auto& row : g) std::fill(row.begin(), row.end(), 0.0);
    return g;
  }
  const double mean = sum / static_cast<double>(count);
  double var = 0.0;
  for (const auto& row : g) {
    for (double v : row) var += (v - mean) * (v - mean);
  }
  const double sigma = std::max(std::sqrt(var / static_cast<double>(count)), kSigmaFloor);
  for (auto& row : g) {
    for (double& v : row) v = (v - mean) / sigma;
  }
  return g;
}

LossResult quark_loss(std::span<const Rollout> batch, const TailoredPolicy& policy, double beta) {
  require_trainable(policy);
  if (beta < 0.0) throw DomainError("kl_coefficient must be >= 0");
  std::vector<const Rollout*> items;
  for (const Rollout& r : batch) {
    if (!r.bin) throw StateError("rollout has no quantile bin");
    if (!r.output.empty()) items.push_back(&r);
  }
  const double tokens = static_cast<double>(std::max<std::size_t>(token_count(batch), 1));
  return batch_gradients(policy.adapter(), items.size(), tokens,
                         [&](Tape<float>& tape, std::span<const Var<float>> w, std::size_t i) {
                           return quark_rollout_loss<float>(tape, policy, w, *items[i], beta);
                         });
}

LossResult ppo_loss(std::span<const Rollout> batch, const TailoredPolicy& policy, double beta, double clip) {
  require_trainable(policy);
  if (!(clip > 0.0 && clip < 1.0)) throw DomainError("clip ratio must lie in (0, 1)");
  for (const Rollout& r : batch) {
    if (r.tailored_logp.size() != r.output.size()) throw StateError("rollout lacks old tailored log-probabilities");
  }
  const std::vector<std::vector<double>> adv = ppo_advantages(batch, beta);
  std::vector<std::size_t> items;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!batch[i].output.empty()) items.push_back(i);
  }
  const double tokens = static_cast<double>(std::max<std::size_t>(token_count(batch), 1));
  return batch_gradients(policy.adapter(), items.size(), tokens,
                         [&](Tape<float>& tape, std::span<const Var<float>> w, std::size_t i) {
                           return ppo_rollout_loss<float>(tape, policy, w, batch[items[i]], adv[items[i]], clip);
                         });
}

std::string_view algorithm_name(RlAlgorithm algorithm) { return algorithm == RlAlgorithm::kQuark ? "quark" : "ppo"; }

RlAlgorithm parse_algorithm(std::string_view name) {
  if (name == "quark") return RlAlgorithm::kQuark;
  if (name == "ppo") return RlAlgorithm::kPpo;
  throw ConfigError("unknown RL algorithm '" + std::string(name) + "' (expected quark|ppo)");
}

void TrainConfig::validate() const {
  if (!(kl_coefficient >= 0.0) || !std::isfinite(kl_coefficient)) throw ConfigError("kl_coefficient must be >= 0");
  if (exploration_frequency < 1) throw ConfigError("exploration_frequency must be >= 1");
  if (quantiles < 2) throw ConfigError("quantiles must be >= 2");
  if (!(clip > 0.0 && clip < 1.0)) throw ConfigError("clip must lie in (0, 1)");
  if (rollouts_per_exploration < 1 || batch_size < 1 || pool_capacity < 1) {
    throw ConfigError("rollouts_per_exploration, batch_size and pool_capacity must be positive");
  }
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  try {
    rollout_decoder.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.message());
  }
}

std::size_t TrainConfig::effective_warmup() const {
  if (warmup_steps) return *warmup_steps;
  return (total_steps * 5 + 99) / 100;
}

nlohmann::json RoundLog::to_json() const {
  return nlohmann::json{{"round", round},     {"step", step},
                        {"mean_reward", mean_reward}, {"loss", loss},
                        {"mean_kl", mean_kl}, {"bin_histogram", bin_histogram},
                        {"seed", seed}};
}

TrainResult train(RlAlgorithm algorithm, const TailoredPolicy& policy, const RewardSpec::Fn& reward,
                  std::span<const TokenSeq> prompts, const TrainConfig& config, std::ostream* log_sink) {
  config.validate();
  require_trainable(policy);
  if (prompts.empty()) throw DomainError("train needs at least one prompt");
  const bool quark = algorithm == RlAlgorithm::kQuark;
  const Vocab& vocab = policy.vocab();
  if (quark && static_cast<std::size_t>(vocab.num_control()) != config.quantiles) {
    throw ConfigMismatch("quark needs one control token per quantile: vocabulary has " +
                         std::to_string(vocab.num_control()) + ", config asks for " + std::to_string(config.quantiles));
  }
  const std::optional<TokenId> best = quark ? std::optional<TokenId>(vocab.control_token(config.quantiles - 1))
                                            : policy.control_token();
  const TailoredPolicy trained = policy.with_control(best);

  std::vector<RoundLog> log;
  LanguageModel& adapter = policy.adapter().model();
  AdamState adam(adapter.params());
  const std::size_t warmup = config.effective_warmup();
  Rng batch_rng(derive_seed(config.seed, {0x62617463}));
  DataPool pool(config.pool_capacity);
  std::vector<Rollout> latest;

  for (std::size_t step = 0, round = 0; step < config.total_steps; ++round) {
    // Exploration: sample prompts, roll out, score, pool.
    const std::uint64_t round_seed = derive_seed(config.seed, {round});
    Rng prompt_rng(derive_seed(round_seed, {0x70726f6d}));
    std::vector<TokenSeq> chosen(config.rollouts_per_exploration);
    for (TokenSeq& p : chosen) p = prompts[prompt_rng.index(prompts.size())];
    DecoderSpec decoder = config.rollout_decoder;
    decoder.seed = round_seed;
    latest = collect_rollouts(trained, chosen, 1, decoder, false);
    score_rollouts(latest, reward);

    RoundLog entry;
    entry.round = round;
    entry.step = step;
    entry.seed = round_seed;
    double kl_sum = 0.0;
    std::size_t kl_tokens = 0;
    for (const Rollout& r : latest) {
      entry.mean_reward += r.reward;
      for (double k : r.step_kl) kl_sum += k;
      kl_tokens += r.step_kl.size();
    }
    entry.mean_reward /= static_cast<double>(latest.size());
    entry.mean_kl = kl_tokens == 0 ? 0.0 : kl_sum / static_cast<double>(kl_tokens);
    if (quark) {
      pool.add(latest);
      pool.partition(config.quantiles);
      entry.bin_histogram = pool.histogram(config.quantiles);
    }

    // Optimisation: F Adam steps on the adapter.
    const std::size_t block_end = std::min(config.total_steps, step + config.exploration_frequency);
    double loss_sum = 0.0;
    const std::size_t block_start = step;
    for (; step < block_end; ++step) {
      std::vector<Rollout> batch;
      batch.reserve(config.batch_size);
      for (std::size_t b = 0; b < config.batch_size; ++b) {
        batch.push_back(quark ? pool[batch_rng.index(pool.size())] : latest[batch_rng.index(latest.size())]);
      }
      LossResult lr = quark ? quark_loss(batch, trained, config.kl_coefficient)
                            : ppo_loss(batch, trained, config.kl_coefficient, config.clip);
      if (!std::isfinite(lr.loss)) throw NumericalError("non-finite RL loss at step " + std::to_string(step));
      loss_sum += lr.loss;
      const auto it = lr.grads.find(adapter.uid());
      if (it != lr.grads.end()) {
        adam_step(adapter.params(), it->second, adam, warmup_learning_rate(config.learning_rate, step, warmup));
      }
    }
    entry.loss = loss_sum / static_cast<double>(block_end - block_start);
    if (log_sink) *log_sink << entry.to_json().dump() << '\n';
    log.push_back(std::move(entry));
  }

  TailoredPolicy result = trained;
  VariantManifest manifest;
  manifest.tag = VariantTag::kDirect;
  manifest.base_digest = policy_digest(policy.base());
  manifest.training_base_digest = manifest.base_digest;
  manifest.adapter_digest = policy_digest(policy.adapter());
  manifest.control_token = best;
  result.set_manifest(std::move(manifest));
  return TrainResult{std::move(result), std::move(log)};
}

#define IPA_INSTANTIATE_RL(T)                                                                                  \
  template Var<T> tailored_log_probs<T>(Tape<T>&, const TailoredPolicy&, std::span<const Var<T>>,             \
                                        const Rollout&, std::optional<TokenId>);                              \
  template Var<T> quark_rollout_loss<T>(Tape<T>&, const TailoredPolicy&, std::span<const Var<T>>,             \
                                        const Rollout&, double);                                              \
  template Var<T> ppo_rollout_loss<T>(Tape<T>&, const TailoredPolicy&, std::span<const Var<T>>, const Rollout&, \
                                      std::span<const double>, double);

IPA_INSTANTIATE_RL(float)
IPA_INSTANTIATE_RL(double)

#undef IPA_INSTANTIATE_RL

}  // namespace ipa
