// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ipa/distribution.hpp"
#include "ipa/model.hpp"

namespace ipa {

enum class Role { kBase, kAdapter, kApproximate };

std::string_view role_name(Role role);
/// ConfigError for unknown names.
Role parse_role(std::string_view name);

/// Shared reference to a language model plus its training flags. Copies of a
/// handle alias the same model and the same frozen flag.
class PolicyHandle {
 public:
  PolicyHandle() = default;
  PolicyHandle(std::shared_ptr<LanguageModel> model, Role role, std::uint64_t seed, bool frozen = false);

  static PolicyHandle create(const ModelConfig& config, const Vocab& vocab, Role role, std::uint64_t seed);

  bool valid() const noexcept { return state_ != nullptr; }
  LanguageModel& model() const { return *state_->model; }
  const ModelConfig& config() const { return state_->model->config(); }
  const Vocab& vocab() const { return state_->model->vocab(); }
  std::uint64_t uid() const { return state_->model->uid(); }

  Role role() const { return state_->role; }
  void set_role(Role role) { state_->role = role; }
  std::uint64_t seed() const { return state_->seed; }
  bool frozen() const { return state_->frozen; }
  void freeze() { state_->frozen = true; }
  void unfreeze() { state_->frozen = false; }

  bool same_model(const PolicyHandle& other) const { return state_->model == other.state_->model; }

 private:
  struct State {
    std::shared_ptr<LanguageModel> model;
    Role role;
    std::uint64_t seed;
    bool frozen;
  };
  std::shared_ptr<State> state_;
};

/// Anything that can produce next-token distributions for generation.
class SequencePolicy {
 public:
  virtual ~SequencePolicy() = default;
  virtual const Vocab& vocab() const = 0;
  virtual Distribution next_dist(std::span<const TokenId> prompt, std::span<const TokenId> generated) const = 0;
};

/// A single language model used directly for generation (the untailored
/// baseline). Control tokens are never emitted.
class LmPolicy : public SequencePolicy {
 public:
  explicit LmPolicy(PolicyHandle handle, double temperature = 1.0);
  const Vocab& vocab() const override { return handle_.vocab(); }
  Distribution next_dist(std::span<const TokenId> prompt, std::span<const TokenId> generated) const override;
  const PolicyHandle& handle() const noexcept { return handle_; }

 private:
  PolicyHandle handle_;
  double temperature_;
};

// ---- scoring ---------------------------------------------------------------

/// Final-position logits. ContextOverflow / IndexError on bad contexts.
std::vector<float> forward_logits(const PolicyHandle& handle, std::span<const TokenId> context);

/// softmax(logits / temperature). DomainError for temperature <= 0.
Distribution next_token_dist(const PolicyHandle& handle, std::span<const TokenId> context, double temperature = 1.0);

/// sum_t log p(output_t | prompt, output_<t). Empty output scores 0. The
/// longest context used is |prompt| + |output| - 1 tokens.
double sequence_logprob(const PolicyHandle& handle, std::span<const TokenId> prompt,
                        std::span<const TokenId> output, double temperature = 1.0);

/// Per-step log-probability rows (|output| x vocab) of the distributions that
/// scored each output token.
std::vector<std::vector<double>> step_log_probs(const PolicyHandle& handle, std::span<const TokenId> prompt,
                                                std::span<const TokenId> output, double temperature = 1.0);

// ---- gradients -------------------------------------------------------------

/// Gradients keyed by the owning model's uid; one tensor per parameter in
/// layout order. Frozen models never get an entry.
using GradMap = std::map<std::uint64_t, std::vector<Tensor<float>>>;

struct LossResult {
  double loss = 0.0;
  GradMap grads;
};

/// Sums per-item losses over `count` items, each built on its own tape against
/// the model's trainable parameters, and divides by `normalizer`. Items run in
/// parallel; the reduction order is fixed so results do not depend on the
/// thread count.
LossResult batch_gradients(const PolicyHandle& handle, std::size_t count, double normalizer,
                           const std::function<Var<float>(Tape<float>&, std::span<const Var<float>>, std::size_t)>& item_loss);

// ---- MLE training ----------------------------------------------------------

/// One training sequence; the loss covers predictions of tokens at positions
/// >= target_begin (position 0 is never predicted).
struct MleExample {
  TokenSeq tokens;
  std::size_t target_begin = 1;
};

struct MleConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 16;
  double learning_rate = 3e-3;
  std::size_t warmup_steps = 25;
  double heldout_fraction = 0.1;
  std::uint64_t seed = 0;
  /// Called with the number of completed steps after each optimizer update.
  std::function<void(std::size_t)> on_step;
};

struct MleResult {
  std::vector<double> loss_curve;
  double initial_heldout_nll = 0.0;
  double final_heldout_nll = 0.0;
};

/// Mean per-target-token negative log-likelihood.
double mean_nll(const PolicyHandle& handle, std::span<const MleExample> examples);

/// Adam on the mean per-token NLL. FrozenPolicyError for frozen handles,
/// ContextOverflow for sequences longer than the model context.
MleResult train_mle(PolicyHandle& handle, std::span<const MleExample> corpus, const MleConfig& config);

/// Linear warmup to `base` over `warmup` steps, then constant.
double warmup_learning_rate(double base, std::size_t step, std::size_t warmup);

std::vector<MleExample> as_mle_examples(std::span<const TokenSeq> sequences);

}  // namespace ipa
