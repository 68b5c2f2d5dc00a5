// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ipa/decoding.hpp"
#include "ipa/rewards.hpp"
#include "ipa/tailoring.hpp"

namespace ipa {

/// One sampled continuation with everything the losses need. The per-step
/// arrays all have |output| entries; `base_rows` caches the frozen base's full
/// log-probability rows so losses never rerun the base.
struct Rollout {
  TokenSeq prompt;
  TokenSeq output;
  std::vector<double> tailored_logp;
  std::vector<double> base_logp;
  std::vector<double> step_kl;
  std::vector<std::vector<double>> base_rows;
  double reward = 0.0;
  std::uint64_t seed = 0;
  std::optional<TokenId> sampled_control;
  std::optional<std::size_t> bin;
};

/// sum_i p_i (log p_i - log q_i). InfiniteKL when p has mass where q has none;
/// DomainError on a size mismatch.
double kl_per_token(const Distribution& tailored, const Distribution& base);

/// Samples `n_per_prompt` rollouts per prompt. Rollout k (prompt-major order)
/// uses stream derive_seed(decoder.seed, {k}). With `condition_on_best_bin`
/// the adapter context starts with the last control token of the vocabulary.
std::vector<Rollout> collect_rollouts(const TailoredPolicy& policy, std::span<const TokenSeq> prompts,
                                      std::size_t n_per_prompt, const DecoderSpec& decoder,
                                      bool condition_on_best_bin);

/// Mean per-token KL(tailored || base) over `samples` (samples[i] continue
/// prompts[i]), scored as generated by `policy`.
double mean_kl_to_base(const TailoredPolicy& policy, std::span<const TokenSeq> prompts,
                       const std::vector<std::vector<TokenSeq>>& samples);

/// Fills `reward` for every rollout. RewardError when the reward throws or
/// returns a non-finite value.
void score_rollouts(std::span<Rollout> rollouts, const RewardSpec::Fn& reward);

/// Bounded FIFO of rollouts with Quark quantile bins.
class DataPool {
 public:
  explicit DataPool(std::size_t capacity = 10000);

  void add(std::vector<Rollout> rollouts);
  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }
  std::size_t capacity() const noexcept { return capacity_; }
  const Rollout& operator[](std::size_t i) const { return items_[i]; }
  const std::deque<Rollout>& items() const noexcept { return items_; }

  /// Stable sort by reward (insertion order breaks ties), then contiguous bins
  /// of near-equal size; larger bins sit at the top so bin k-1 always holds
  /// the best rollouts. Returns false when the pool has fewer than k rollouts,
  /// in which case the low bins stay empty. StateError on an empty pool,
  /// DomainError for k < 2.
  bool partition(std::size_t k);
  std::vector<std::size_t> histogram(std::size_t k) const;

 private:
  std::deque<Rollout> items_;
  std::size_t capacity_;
};

bool quark_partition(DataPool& pool, std::size_t k);

// ---- losses ---------------------------------------------------------------

/// Tailored log-probabilities [|output| x vocab] on `tape` as a function of the
/// adapter weights `w`; the base enters through rollout.base_rows as constants.
template <typename T>
Var<T> tailored_log_probs(Tape<T>& tape, const TailoredPolicy& policy, std::span<const Var<T>> w,
                          const Rollout& rollout, std::optional<TokenId> control);

/// -sum_t log p(y_t | control_bin, ...) + beta * sum_t KL_t for one rollout.
template <typename T>
Var<T> quark_rollout_loss(Tape<T>& tape, const TailoredPolicy& policy, std::span<const Var<T>> w,
                          const Rollout& rollout, double beta);

/// -sum_t min(rho_t A_t, clip(rho_t, 1-eps, 1+eps) A_t) for one rollout.
template <typename T>
Var<T> ppo_rollout_loss(Tape<T>& tape, const TailoredPolicy& policy, std::span<const Var<T>> w,
                        const Rollout& rollout, std::span<const double> advantages, double clip);

/// KL-shaped returns G_t = R - beta * sum_{s>=t} KL_s, whitened over every
/// token of the batch (sigma floored at 1e-6; a constant batch gives zeros).
std::vector<std::vector<double>> ppo_advantages(std::span<const Rollout> batch, double beta);

/// Mean over batch tokens of the Quark objective. StateError for a rollout
/// without a bin; gradients cover the adapter only.
LossResult quark_loss(std::span<const Rollout> batch, const TailoredPolicy& policy, double beta);
/// Clipped surrogate averaged over batch tokens. StateError when old
/// log-probabilities are missing.
LossResult ppo_loss(std::span<const Rollout> batch, const TailoredPolicy& policy, double beta, double clip);

// ---- training loop --------------------------------------------------------

enum class RlAlgorithm { kQuark, kPpo };

std::string_view algorithm_name(RlAlgorithm algorithm);
/// ConfigError for names other than quark | ppo.
RlAlgorithm parse_algorithm(std::string_view name);

struct TrainConfig {
  double kl_coefficient = 0.05;
  std::size_t exploration_frequency = 8;
  std::size_t quantiles = 5;
  double clip = 0.2;
  std::size_t rollouts_per_exploration = 64;
  std::size_t batch_size = 32;
  std::size_t total_steps = 400;
  double learning_rate = 3e-3;
  /// Linear warmup length; defaults to 5% of total_steps (rounded up).
  std::optional<std::size_t> warmup_steps;
  std::size_t pool_capacity = 10000;
  DecoderSpec rollout_decoder = DecoderSpec::nucleus(1.0, 12);
  std::uint64_t seed = 0;

  /// ConfigError unless beta >= 0, F >= 1, K >= 2, 0 < eps < 1 and the
  /// remaining sizes are positive.
  void validate() const;
  std::size_t effective_warmup() const;
};

struct RoundLog {
  std::size_t round = 0;
  std::size_t step = 0;
  double mean_reward = 0.0;
  double loss = 0.0;
  double mean_kl = 0.0;
  std::vector<std::size_t> bin_histogram;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  TailoredPolicy policy;  // the trained adapter over the training base, manifest attached
  std::vector<RoundLog> log;
};

/// Optimises the adapter of `policy` in place. One exploration round runs
/// before every block of F gradient steps. Quark needs the vocabulary to carry
/// exactly K control tokens (ConfigMismatch otherwise) and returns the policy
/// conditioned on the best bin. NumericalError on a non-finite loss,
/// RewardError when the reward fails. Each round's record is also written to
/// `log_sink` as a JSON line when given.
TrainResult train(RlAlgorithm algorithm, const TailoredPolicy& policy, const RewardSpec::Fn& reward,
                  std::span<const TokenSeq> prompts, const TrainConfig& config, std::ostream* log_sink = nullptr);

}  // namespace ipa
