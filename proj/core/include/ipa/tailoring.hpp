// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ipa/checkpoint.hpp"
#include "ipa/policy.hpp"

namespace ipa {

/// Normaliser below which the product is treated as having disjoint supports.
inline constexpr double kMinProductMass = 1e-30;

/// base[i] * adapter[i] / Z, evaluated in log space. DegenerateProduct when
/// Z < kMinProductMass, DomainError when the sizes differ.
Distribution product_of_experts(const Distribution& base, const Distribution& adapter);

/// Log-space form: returns normalised log-probabilities of the product.
/// Entries may be -inf (zero probability).
std::vector<double> product_of_experts_log(std::span<const double> base_log_probs,
                                           std::span<const double> adapter_log_probs);

struct SideTemperatures {
  double base = 1.0;
  double adapter = 1.0;
};

/// Per-step log-probabilities seen by the tailored policy.
struct StepLogProbs {
  std::vector<double> base;      // base side, log p_base
  std::vector<double> adapter;   // adapter side with control tokens removed
  std::vector<double> tailored;  // normalised product
};

enum class VariantTag { kDirect, kTransfer, kDistilled };

std::string_view variant_name(VariantTag tag);
VariantTag parse_variant(std::string_view name);

/// Provenance of an assembled tailored policy; stored in adapter checkpoints.
struct VariantManifest {
  VariantTag tag = VariantTag::kDirect;
  std::string base_digest;
  std::string training_base_digest;
  std::string adapter_digest;
  std::optional<TokenId> control_token;

  Metadata to_metadata() const;
  /// FormatError when a manifest key is missing.
  static VariantManifest from_metadata(const Metadata& meta);
  friend bool operator==(const VariantManifest&, const VariantManifest&) = default;
};

/// Frozen base combined with a trainable adapter. The base sees
/// prompt ++ generated; the adapter sees [control] ++ prompt ++ generated.
class TailoredPolicy : public SequencePolicy {
 public:
  /// Freezes `base`. ConfigMismatch when the vocabularies differ; DomainError
  /// when `control` is not a control token.
  TailoredPolicy(PolicyHandle base, PolicyHandle adapter, std::optional<TokenId> control = std::nullopt,
                 SideTemperatures temperatures = {});

  const Vocab& vocab() const override { return base_.vocab(); }
  Distribution next_dist(std::span<const TokenId> prompt, std::span<const TokenId> generated) const override;

  StepLogProbs next_log_probs(std::span<const TokenId> prompt, std::span<const TokenId> generated) const;
  /// Log-probabilities for every step of `output`, from one forward pass per side.
  std::vector<StepLogProbs> score(std::span<const TokenId> prompt, std::span<const TokenId> output) const;

  TokenSeq base_context(std::span<const TokenId> prompt, std::span<const TokenId> generated) const;
  TokenSeq adapter_context(std::span<const TokenId> prompt, std::span<const TokenId> generated) const;

  const PolicyHandle& base() const noexcept { return base_; }
  const PolicyHandle& adapter() const noexcept { return adapter_; }
  std::optional<TokenId> control_token() const noexcept { return control_; }
  const SideTemperatures& temperatures() const noexcept { return temperatures_; }
  const std::optional<VariantManifest>& manifest() const noexcept { return manifest_; }

  TailoredPolicy with_control(std::optional<TokenId> control) const;
  void set_manifest(VariantManifest manifest) { manifest_ = std::move(manifest); }

 private:
  PolicyHandle base_;
  PolicyHandle adapter_;
  std::optional<TokenId> control_;
  SideTemperatures temperatures_;
  std::optional<VariantManifest> manifest_;
};

Distribution tailored_next_dist(const TailoredPolicy& policy, std::span<const TokenId> prompt,
                                std::span<const TokenId> generated);

/// sum_t log p_tailored(output_t | ...), each step normalised on its own.
double tailored_sequence_logprob(const TailoredPolicy& policy, std::span<const TokenId> prompt,
                                 std::span<const TokenId> output);

/// How an adapter relates to the base it was trained against.
struct IpaVariant {
  VariantTag tag = VariantTag::kDirect;
  PolicyHandle training_base;
};

/// Wires `adapter` over `deployment_base` and records the manifest.
/// ConfigMismatch when vocabularies differ, when Direct is given two different
/// bases, when Transfer is given the same base twice, or when Distilled is
/// given a training base whose role is not approximate.
TailoredPolicy assemble_variant(const IpaVariant& variant, const PolicyHandle& deployment_base,
                                const PolicyHandle& adapter, std::optional<TokenId> control = std::nullopt);

}  // namespace ipa
