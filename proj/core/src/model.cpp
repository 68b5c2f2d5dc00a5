// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipa/model.hpp"

#include <atomic>
#include <cmath>
#include <numeric>

#include "ipa/rng.hpp"

namespace ipa {
namespace {

std::uint64_t next_uid() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < Vocab::kNumSpecial + 1) throw ConfigError("model: vocab_size too small");
  if (width == 0 || heads == 0 || layers == 0 || context == 0) {
    throw ConfigError("model: width, heads, layers and context must be positive");
  }
  if (width % heads != 0) throw ConfigError("model: width must be divisible by heads");
  if (!(init_std > 0.0)) throw ConfigError("model: init_std must be positive");
}

std::vector<ParamSpec> param_layout(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.width, v = c.vocab_size;
  std::vector<ParamSpec> specs = {
      {"tok_emb", {v, d}, ParamInit::kNormal},
      {"pos_emb", {c.context, d}, ParamInit::kNormal},
  };
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    specs.push_back({p + "ln1.gain", {d}, ParamInit::kOne});
    specs.push_back({p + "ln1.bias", {d}, ParamInit::kZero});
    specs.push_back({p + "attn.qkv.weight", {d, 3 * d}, ParamInit::kNormal});
    specs.push_back({p + "attn.qkv.bias", {3 * d}, ParamInit::kZero});
    specs.push_back({p + "attn.out.weight", {d, d}, ParamInit::kNormal});
    specs.push_back({p + "attn.out.bias", {d}, ParamInit::kZero});
    specs.push_back({p + "ln2.gain", {d}, ParamInit::kOne});
    specs.push_back({p + "ln2.bias", {d}, ParamInit::kZero});
    specs.push_back({p + "mlp.fc.weight", {d, 4 * d}, ParamInit::kNormal});
    specs.push_back({p + "mlp.fc.bias", {4 * d}, ParamInit::kZero});
    specs.push_back({p + "mlp.proj.weight", {4 * d, d}, ParamInit::kNormal});
    specs.push_back({p + "mlp.proj.bias", {d}, ParamInit::kZero});
  }
  specs.push_back({"ln_f.gain", {d}, ParamInit::kOne});
  specs.push_back({"ln_f.bias", {d}, ParamInit::kZero});
  if (!c.tie_embeddings) specs.push_back({"head.weight", {d, v}, ParamInit::kNormal});
  specs.push_back({"head.bias", {v}, ParamInit::kZero});
  return specs;
}

template <typename T>
Var<T> transformer_logits(const ModelConfig& c, std::span<const Var<T>> w, std::span<const TokenId> context) {
  const std::size_t n = context.size();
  if (n == 0 || n > c.context) {
    throw ContextOverflow("context length " + std::to_string(n) + " outside [1, " + std::to_string(c.context) + "]");
  }
  for (TokenId id : context) {
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(c.vocab_size));
    }
  }
  const std::size_t expected = 4 + 12 * c.layers + (c.tie_embeddings ? 1 : 2);
  if (w.size() != expected) throw ShapeError("transformer_logits: wrong number of weight tensors");

  std::size_t k = 0;
  const Var<T>& tok = w[k++];
  const Var<T>& pos = w[k++];
  std::vector<ops::TokenIndex> positions(n);
  std::iota(positions.begin(), positions.end(), 0);
  Var<T> x = ops::add(ops::gather_rows(tok, context), ops::gather_rows(pos, std::span<const ops::TokenIndex>(positions)));

  const std::size_t d = c.width, dh = d / c.heads;
  const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (std::size_t l = 0; l < c.layers; ++l) {
    const Var<T>& ln1g = w[k++];
    const Var<T>& ln1b = w[k++];
    const Var<T>& wqkv = w[k++];
    const Var<T>& bqkv = w[k++];
    const Var<T>& wo = w[k++];
    const Var<T>& bo = w[k++];
    const Var<T>& ln2g = w[k++];
    const Var<T>& ln2b = w[k++];
    const Var<T>& w1 = w[k++];
    const Var<T>& b1 = w[k++];
    const Var<T>& w2 = w[k++];
    const Var<T>& b2 = w[k++];

    const Var<T> h = ops::layer_norm(x, ln1g, ln1b);
    const Var<T> qkv = ops::add_row(ops::matmul(h, wqkv), bqkv);
    std::vector<Var<T>> heads;
    heads.reserve(c.heads);
    for (std::size_t hd = 0; hd < c.heads; ++hd) {
      const Var<T> q = ops::slice_cols(qkv, hd * dh, (hd + 1) * dh);
      const Var<T> key = ops::slice_cols(qkv, d + hd * dh, d + (hd + 1) * dh);
      const Var<T> v = ops::slice_cols(qkv, 2 * d + hd * dh, 2 * d + (hd + 1) * dh);
      const Var<T> att = ops::causal_softmax(ops::scale(ops::matmul_nt(q, key), att_scale));
      heads.push_back(ops::matmul(att, v));
    }
    const Var<T> mixed = heads.size() == 1 ? heads[0] : ops::concat_cols(std::span<const Var<T>>(heads));
    x = ops::add(x, ops::add_row(ops::matmul(mixed, wo), bo));
    const Var<T> h2 = ops::layer_norm(x, ln2g, ln2b);
    const Var<T> f = ops::gelu(ops::add_row(ops::matmul(h2, w1), b1));
    x = ops::add(x, ops::add_row(ops::matmul(f, w2), b2));
  }
  const Var<T>& lnfg = w[k++];
  const Var<T>& lnfb = w[k++];
  const Var<T> h = ops::layer_norm(x, lnfg, lnfb);
  if (c.tie_embeddings) {
    const Var<T>& hb = w[k++];
    return ops::add_row(ops::matmul_nt(h, tok), hb);
  }
  const Var<T>& hw = w[k++];
  const Var<T>& hb = w[k++];
  return ops::add_row(ops::matmul(h, hw), hb);
}

template Var<float> transformer_logits<float>(const ModelConfig&, std::span<const Var<float>>, std::span<const TokenId>);
template Var<double> transformer_logits<double>(const ModelConfig&, std::span<const Var<double>>,
                                                std::span<const TokenId>);

LanguageModel::LanguageModel(ModelConfig config, Vocab vocab, std::uint64_t seed)
    : config_(config), vocab_(std::move(vocab)), uid_(next_uid()) {
  if (config_.vocab_size != vocab_.size()) throw ConfigMismatch("model vocab_size differs from vocabulary size");
  Rng rng(seed);
  for (const ParamSpec& spec : param_layout(config_)) {
    Tensor<float> t(spec.shape);
    if (spec.init == ParamInit::kOne) {
      t.fill(1.0f);
    } else if (spec.init == ParamInit::kNormal) {
      for (float& v : t.data()) v = static_cast<float>(rng.normal(0.0, config_.init_std));
    }
    names_.push_back(spec.name);
    params_.push_back(std::move(t));
  }
}

LanguageModel::LanguageModel(ModelConfig config, Vocab vocab, std::vector<Tensor<float>> params)
    : config_(config), vocab_(std::move(vocab)), params_(std::move(params)), uid_(next_uid()) {
  if (config_.vocab_size != vocab_.size()) throw ConfigMismatch("model vocab_size differs from vocabulary size");
  const std::vector<ParamSpec> layout = param_layout(config_);
  if (layout.size() != params_.size()) throw ConfigMismatch("parameter count does not match model config");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].shape != params_[i].shape()) {
      throw ConfigMismatch("parameter " + layout[i].name + " has shape " + shape_string(params_[i].shape()) +
                           ", config expects " + shape_string(layout[i].shape));
    }
    names_.push_back(layout[i].name);
  }
}

std::size_t LanguageModel::num_parameters() const noexcept {
  std::size_t n = 0;
  for (const Tensor<float>& p : params_) n += p.numel();
  return n;
}

template <typename T>
std::vector<Var<T>> LanguageModel::bind(Tape<T>& tape, bool trainable) const {
  std::vector<Var<T>> out;
  out.reserve(params_.size());
  for (const Tensor<float>& p : params_) {
    if constexpr (std::is_same_v<T, float>) {
      out.push_back(tape.leaf(p, trainable));
    } else {
      out.push_back(tape.leaf(p.template cast<T>(), trainable));
    }
  }
  return out;
}

template std::vector<Var<float>> LanguageModel::bind<float>(Tape<float>&, bool) const;
template std::vector<Var<double>> LanguageModel::bind<double>(Tape<double>&, bool) const;

Tensor<float> LanguageModel::logits_all(std::span<const TokenId> context) const {
  Tape<float> tape;
  const std::vector<Var<float>> w = bind(tape, false);
  return transformer_logits<float>(config_, w, context).value();
}

std::vector<float> LanguageModel::logits_last(std::span<const TokenId> context) const {
  const Tensor<float> all = logits_all(context);
  const auto row = all.row(all.rows() - 1);
  return {row.begin(), row.end()};
}

}  // namespace ipa
