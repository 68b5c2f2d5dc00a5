// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ipa/autograd.hpp"
#include "ipa/vocab.hpp"

namespace ipa {

/// Decoder-only transformer hyperparameters.
struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t width = 32;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t context = 32;
  bool tie_embeddings = false;
  double init_std = 0.02;

  /// ConfigError on inconsistent sizes.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class ParamInit { kNormal, kZero, kOne };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamInit init;
};

/// Canonical parameter order for a configuration. Every forward pass and
/// checkpoint uses this order.
std::vector<ParamSpec> param_layout(const ModelConfig& config);

/// Logits for every position of `context`, shape [len x vocab]. Row t depends
/// only on context[0..t]. ContextOverflow for an empty or over-long context,
/// IndexError for out-of-range ids.
template <typename T>
Var<T> transformer_logits(const ModelConfig& config, std::span<const Var<T>> weights,
                          std::span<const TokenId> context);

class LanguageModel {
 public:
  /// Fresh model: Gaussian(0, init_std) matrices, zero biases, unit LN gains.
  LanguageModel(ModelConfig config, Vocab vocab, std::uint64_t seed);
  /// Model from existing tensors; ConfigMismatch when they do not fit `config`.
  LanguageModel(ModelConfig config, Vocab vocab, std::vector<Tensor<float>> params);

  const ModelConfig& config() const noexcept { return config_; }
  const Vocab& vocab() const noexcept { return vocab_; }
  const std::vector<std::string>& param_names() const noexcept { return names_; }
  std::span<Tensor<float>> params() noexcept { return params_; }
  std::span<const Tensor<float>> params() const noexcept { return params_; }
  std::size_t num_parameters() const noexcept;
  /// Process-unique identity, used to key gradient maps.
  std::uint64_t uid() const noexcept { return uid_; }

  /// Registers the parameters on `tape` (converted to T).
  template <typename T>
  std::vector<Var<T>> bind(Tape<T>& tape, bool trainable) const;

  /// All-position logits without recording gradients.
  Tensor<float> logits_all(std::span<const TokenId> context) const;
  /// Final-position logits.
  std::vector<float> logits_last(std::span<const TokenId> context) const;

 private:
  ModelConfig config_;
  Vocab vocab_;
  std::vector<std::string> names_;
  std::vector<Tensor<float>> params_;
  std::uint64_t uid_;
};

}  // namespace ipa
