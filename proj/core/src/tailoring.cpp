// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipa/tailoring.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ipa {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<double> log_of(std::span<const double> probs) {
  std::vector<double> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] > 0.0 ? std::log(probs[i]) : kNegInf;
  return out;
}

// Adapter log-probs with control tokens removed and the rest renormalised.
std::vector<double> adapter_log_probs(std::span<const float> logits, double temperature, const Vocab& vocab) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  std::vector<double> out(logits.size());
  double m = kNegInf;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = vocab.is_control(static_cast<TokenId>(i)) ? kNegInf : static_cast<double>(logits[i]) / temperature;
    m = std::max(m, out[i]);
  }
  double s = 0.0;
  for (double v : out) s += std::exp(v - m);
  const double lse = m + std::log(s);
  for (double& v : out) v -= lse;
  return out;
}

StepLogProbs combine(std::span<const float> base_logits, std::span<const float> adapter_logits,
                     const SideTemperatures& temps, const Vocab& vocab) {
  StepLogProbs step;
  step.base = log_softmax(base_logits, temps.base);
  step.adapter = adapter_log_probs(adapter_logits, temps.adapter, vocab);
  step.tailored = product_of_experts_log(step.base, step.adapter);
  return step;
}

}  // namespace

std::vector<double> product_of_experts_log(std::span<const double> base_log_probs,
                                           std::span<const double> adapter_log_probs) {
  if (base_log_probs.size() != adapter_log_probs.size()) {
    throw DomainError("product_of_experts: distributions over different vocabularies");
  }
  std::vector<double> joint(base_log_probs.size());
  double m = kNegInf;
  for (std::size_t i = 0; i < joint.size(); ++i) {
    joint[i] = base_log_probs[i] + adapter_log_probs[i];
    m = std::max(m, joint[i]);
  }
  if (m == kNegInf) throw DegenerateProduct("product_of_experts: supports are disjoint");
  double s = 0.0;
  for (double v : joint) s += std::exp(v - m);
  const double log_z = m + std::log(s);
  if (log_z < std::log(kMinProductMass)) {
    throw DegenerateProduct("product_of_experts: normaliser below 1e-30");
  }
  for (double& v : joint) v -= log_z;
  return joint;
}

Distribution product_of_experts(const Distribution& base, const Distribution& adapter) {
  if (base.size() != adapter.size()) throw DomainError("product_of_experts: distributions over different vocabularies");
  const std::vector<double> lp = product_of_experts_log(log_of(base.probs()), log_of(adapter.probs()));
  std::vector<double> p(lp.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(lp[i]);
  return Distribution(std::move(p));
}

TailoredPolicy::TailoredPolicy(PolicyHandle base, PolicyHandle adapter, std::optional<TokenId> control,
                               SideTemperatures temperatures)
    : base_(std::move(base)), adapter_(std::move(adapter)), control_(control), temperatures_(temperatures) {
  if (!base_.valid() || !adapter_.valid()) throw ConfigMismatch("tailored policy needs both a base and an adapter");
  if (!(base_.vocab() == adapter_.vocab())) throw ConfigMismatch("base and adapter vocabularies differ");
  if (control_ && !base_.vocab().is_control(*control_)) {
    throw DomainError("token " + std::to_string(*control_) + " is not a control token");
  }
  if (!(temperatures_.base > 0.0) || !(temperatures_.adapter > 0.0)) {
    throw DomainError("temperatures must be positive");
  }
  base_.freeze();
}

TokenSeq TailoredPolicy::base_context(std::span<const TokenId> prompt, std::span<const TokenId> generated) const {
  TokenSeq ctx(prompt.begin(), prompt.end());
  ctx.insert(ctx.end(), generated.begin(), generated.end());
  return ctx;
}

TokenSeq TailoredPolicy::adapter_context(std::span<const TokenId> prompt, std::span<const TokenId> generated) const {
  TokenSeq ctx;
  if (control_) ctx.push_back(*control_);
  ctx.insert(ctx.end(), prompt.begin(), prompt.end());
  ctx.insert(ctx.end(), generated.begin(), generated.end());
  return ctx;
}

StepLogProbs TailoredPolicy::next_log_probs(std::span<const TokenId> prompt, std::span<const TokenId> generated) const {
  const std::vector<float> base_logits = forward_logits(base_, base_context(prompt, generated));
  const std::vector<float> adapter_logits = forward_logits(adapter_, adapter_context(prompt, generated));
  return combine(base_logits, adapter_logits, temperatures_, vocab());
}

Distribution TailoredPolicy::next_dist(std::span<const TokenId> prompt, std::span<const TokenId> generated) const {
  return Distribution::from_log_probs(next_log_probs(prompt, generated).tailored);
}

std::vector<StepLogProbs> TailoredPolicy::score(std::span<const TokenId> prompt, std::span<const TokenId> output) const {
  if (output.empty()) return {};
  if (prompt.empty()) throw ContextOverflow("scoring needs a non-empty prompt");
  const std::span<const TokenId> head = output.first(output.size() - 1);
  const Tensor<float> base_logits = base_.model().logits_all(base_context(prompt, head));
  const Tensor<float> adapter_logits = adapter_.model().logits_all(adapter_context(prompt, head));
  const std::size_t offset = control_ ? 1 : 0;
  std::vector<StepLogProbs> steps;
  steps.reserve(output.size());
  for (std::size_t t = 0; t < output.size(); ++t) {
    const std::size_t row = prompt.size() - 1 + t;
    steps.push_back(combine(base_logits.row(row), adapter_logits.row(row + offset), temperatures_, vocab()));
  }
  return steps;
}

TailoredPolicy TailoredPolicy::with_control(std::optional<TokenId> control) const {
  TailoredPolicy copy(base_, adapter_, control, temperatures_);
  copy.manifest_ = manifest_;
  if (copy.manifest_) copy.manifest_->control_token = control;
  return copy;
}

Distribution tailored_next_dist(const TailoredPolicy& policy, std::span<const TokenId> prompt,
                                std::span<const TokenId> generated) {
  return policy.next_dist(prompt, generated);
}

double tailored_sequence_logprob(const TailoredPolicy& policy, std::span<const TokenId> prompt,
                                 std::span<const TokenId> output) {
  const std::vector<StepLogProbs> steps = policy.score(prompt, output);
  double total = 0.0;
  for (std::size_t t = 0; t < output.size(); ++t) {
    if (!policy.vocab().contains(output[t])) throw IndexError("output token outside vocabulary");
    total += steps[t].tailored[static_cast<std::size_t>(output[t])];
  }
  return total;
}

std::string_view variant_name(VariantTag tag) {
  switch (tag) {
    case VariantTag::kDirect:
      return "direct";
    case VariantTag::kTransfer:
      return "transfer";
    case VariantTag::kDistilled:
      return "distilled";
  }
  return "direct";
}

VariantTag parse_variant(std::string_view name) {
  if (name == "direct") return VariantTag::kDirect;
  if (name == "transfer") return VariantTag::kTransfer;
  if (name == "distilled") return VariantTag::kDistilled;
  throw ConfigError("unknown variant '" + std::string(name) + "' (expected direct|transfer|distilled)");
}

Metadata VariantManifest::to_metadata() const {
  Metadata meta;
  meta["manifest.variant"] = std::string(variant_name(tag));
  meta["manifest.base_digest"] = base_digest;
  meta["manifest.training_base_digest"] = training_base_digest;
  meta["manifest.adapter_digest"] = adapter_digest;
  meta["manifest.control_token"] = control_token ? std::to_string(*control_token) : "none";
  return meta;
}

VariantManifest VariantManifest::from_metadata(const Metadata& meta) {
  auto get = [&](const std::string& key) -> const std::string& {
    const auto it = meta.find(key);
    if (it == meta.end()) throw FormatError("manifest lacks '" + key + "'");
    return it->second;
  };
  VariantManifest m;
  m.tag = parse_variant(get("manifest.variant"));
  m.base_digest = get("manifest.base_digest");
  m.training_base_digest = get("manifest.training_base_digest");
  m.adapter_digest = get("manifest.adapter_digest");
  const std::string& ctl = get("manifest.control_token");
  if (ctl != "none") m.control_token = static_cast<TokenId>(std::stoi(ctl));
  return m;
}

TailoredPolicy assemble_variant(const IpaVariant& variant, const PolicyHandle& deployment_base,
                                const PolicyHandle& adapter, std::optional<TokenId> control) {
  if (!variant.training_base.valid()) throw ConfigMismatch("variant lacks its training base");
  const Vocab& vocab = deployment_base.vocab();
  if (!(variant.training_base.vocab() == vocab) || !(adapter.vocab() == vocab)) {
    throw ConfigMismatch("variant policies do not share a vocabulary");
  }
  const std::string deploy_digest = policy_digest(deployment_base);
  const std::string train_digest = policy_digest(variant.training_base);
  const bool same = variant.training_base.same_model(deployment_base) || deploy_digest == train_digest;
  switch (variant.tag) {
    case VariantTag::kDirect:
      if (!same) throw ConfigMismatch("direct variant: adapter was trained against a different base");
      break;
    case VariantTag::kTransfer:
      if (same) throw ConfigMismatch("transfer variant: training and deployment bases are identical");
      break;
    case VariantTag::kDistilled:
      if (variant.training_base.role() != Role::kApproximate) {
        throw ConfigMismatch("distilled variant: training base is not an approximate policy");
      }
      break;
  }
  TailoredPolicy policy(deployment_base, adapter, control);
  policy.set_manifest(VariantManifest{variant.tag, deploy_digest, train_digest, policy_digest(adapter), control});
  return policy;
}

}  // namespace ipa
