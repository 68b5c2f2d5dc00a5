// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipa/distill.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ipa/checkpoint.hpp"
#include "ipa/metrics.hpp"
#include "ipa/parallel.hpp"

namespace ipa {
namespace {

std::vector<double> masked_log_probs(std::span<const double> log_probs, const Vocab& vocab) {
  std::vector<double> p(log_probs.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(log_probs[i]);
  const Distribution d = without_control_tokens(Distribution::normalized(std::move(p)), vocab);
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i] > 0.0 ? std::log(d[i]) : -INFINITY;
  return out;
}

}  // namespace

std::string KDCorpus::to_jsonl() const {
  std::ostringstream out;
  const nlohmann::json header{{"kind", "kd_corpus"},
                              {"teacher_digest", teacher_digest},
                              {"decoder", decoder_to_json(decoder)},
                              {"vocab", {{"symbols", vocab.symbols()}, {"num_control", vocab.num_control()}}},
                              {"pairs", pairs.size()},
                              {"recipe_digest", recipe_digest}};
  out << header.dump() << '\n';
  for (const KdPair& p : pairs) {
    out << nlohmann::json{{"prompt", p.prompt}, {"output", p.output}, {"teacher_digest", teacher_digest},
                          {"seed", p.seed}}
               .dump()
        << '\n';
  }
  return out.str();
}

KDCorpus KDCorpus::from_jsonl(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  KDCorpus c;
  try {
    if (!std::getline(in, line)) throw FormatError("kd corpus: missing header");
    const nlohmann::json h = nlohmann::json::parse(line);
    if (h.at("kind") != "kd_corpus") throw FormatError("kd corpus: wrong header kind");
    c.teacher_digest = h.at("teacher_digest").get<std::string>();
    c.decoder = decoder_from_json(h.at("decoder"));
    c.vocab = Vocab(h.at("vocab").at("symbols").get<std::vector<std::string>>(),
                    h.at("vocab").at("num_control").get<int>());
    c.recipe_digest = h.value("recipe_digest", std::string());
    const auto expected = h.at("pairs").get<std::size_t>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const nlohmann::json r = nlohmann::json::parse(line);
      if (r.at("teacher_digest").get<std::string>() != c.teacher_digest) {
        throw FormatError("kd corpus: record from a different teacher");
      }
      c.pairs.push_back(KdPair{r.at("prompt").get<TokenSeq>(), r.at("output").get<TokenSeq>(),
                               r.at("seed").get<std::uint64_t>()});
    }
    if (c.pairs.size() != expected) throw FormatError("kd corpus: pair count differs from header");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("kd corpus: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError("kd corpus: " + e.message());
  }
  return c;
}

bool operator==(const KDCorpus& a, const KDCorpus& b) {
  return a.pairs == b.pairs && a.teacher_digest == b.teacher_digest && a.vocab == b.vocab &&
         a.recipe_digest == b.recipe_digest &&
         decoder_to_json(a.decoder) == decoder_to_json(b.decoder);
}

DecoderSpec kd_decoder(std::size_t max_length, std::uint64_t seed) { return DecoderSpec::nucleus(0.9, max_length, seed); }

KDCorpus generate_kd_corpus(const PolicyHandle& teacher, std::span<const TokenSeq> prompts, std::size_t n_per_prompt,
                            const DecoderSpec& decoder) {
  if (!teacher.frozen()) throw StateError("the distillation teacher must be frozen");
  decoder.validate();
  KDCorpus corpus;
  corpus.teacher_digest = policy_digest(teacher);
  corpus.vocab = teacher.vocab();
  corpus.decoder = decoder;
  if (n_per_prompt == 0 || prompts.empty()) return corpus;
  const LmPolicy policy(teacher);
  const SampleMatrix samples = sample_outputs(policy, prompts, n_per_prompt, decoder);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    for (std::size_t j = 0; j < n_per_prompt; ++j) {
      corpus.pairs.push_back(KdPair{prompts[i], samples[i][j], derive_seed(decoder.seed, {i, j})});
    }
  }
  return corpus;
}

MleResult fit_approximate(PolicyHandle& student, const KDCorpus& corpus, const MleConfig& config) {
  if (!(student.vocab() == corpus.vocab)) throw ConfigMismatch("student vocabulary differs from the teacher's");
  std::vector<MleExample> examples;
  examples.reserve(corpus.pairs.size());
  for (const KdPair& p : corpus.pairs) {
    if (p.prompt.empty()) throw DomainError("kd pair with an empty prompt");
    MleExample ex{p.prompt, p.prompt.size()};
    ex.tokens.insert(ex.tokens.end(), p.output.begin(), p.output.end());
    examples.push_back(std::move(ex));
  }
  MleResult result = train_mle(student, examples, config);
  student.set_role(Role::kApproximate);
  student.freeze();
  return result;
}

double eval_kd_gap(const PolicyHandle& teacher, const PolicyHandle& approximate, std::span<const TokenSeq> prompts,
                   std::size_t horizon, const DecoderSpec& decoder) {
  if (horizon == 0) throw DomainError("eval_kd_gap needs horizon >= 1");
  if (prompts.empty()) throw EmptyEvalSet("eval_kd_gap over zero prompts");
  if (!(teacher.vocab() == approximate.vocab())) throw ConfigMismatch("teacher and approximate vocabularies differ");
  DecoderSpec spec = decoder;
  spec.max_length = horizon;
  spec.validate();
  const LmPolicy sampler(teacher);
  const Vocab& vocab = teacher.vocab();
  std::vector<double> kl(prompts.size(), 0.0);
  std::vector<std::size_t> steps(prompts.size(), 0);
  parallel_for(prompts.size(), [&](std::size_t i) {
    Rng rng(derive_seed(spec.seed, {i}));
    const TokenSeq y = sample_sequence(sampler, prompts[i], spec, rng);
    const auto tp = step_log_probs(teacher, prompts[i], y);
    const auto ap = step_log_probs(approximate, prompts[i], y);
    for (std::size_t t = 0; t < y.size(); ++t) {
      const std::vector<double> lp = masked_log_probs(tp[t], vocab);
      const std::vector<double> lq = masked_log_probs(ap[t], vocab);
      double step_kl = 0.0;
      for (std::size_t v = 0; v < lp.size(); ++v) {
        if (!std::isfinite(lp[v])) continue;
        step_kl += std::exp(lp[v]) * (lp[v] - std::max(lq[v], kKdLogFloor));
      }
      kl[i] += std::max(step_kl, 0.0);
    }
    steps[i] = y.size();
  });
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    total += kl[i];
    count += steps[i];
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

}  // namespace ipa
