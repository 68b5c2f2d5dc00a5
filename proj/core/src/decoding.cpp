// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipa/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ipa {
namespace {

// Keeps the shortest prefix of `ranked` whose mass reaches `threshold`.
Distribution keep_prefix(const Distribution& dist, const std::vector<std::size_t>& ranked, double threshold) {
  std::vector<double> out(dist.size(), 0.0);
  double mass = 0.0;
  for (std::size_t i : ranked) {
    if (mass >= threshold) break;
    out[i] = dist[i];
    mass += dist[i];
  }
  return Distribution::normalized(std::move(out));
}

std::vector<std::size_t> support(const Distribution& dist) {
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] > 0.0) ids.push_back(i);
  }
  return ids;
}

std::vector<std::size_t> rank_by_probability(const Distribution& dist) {
  std::vector<std::size_t> ids = support(dist);
  std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
  return ids;
}

}  // namespace

void DecoderSpec::validate() const {
  if (top_k < 1) throw DomainError("decoder: top_k must be >= 1");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw DomainError("decoder: top_p must be in (0, 1]");
  if (!(typical_tau > 0.0 && typical_tau <= 1.0)) throw DomainError("decoder: typical_tau must be in (0, 1]");
  if (!(temperature > 0.0)) throw DomainError("decoder: temperature must be positive");
  if (max_length < 1) throw DomainError("decoder: max_length must be >= 1");
}

DecoderSpec DecoderSpec::greedy(std::size_t max_length) {
  DecoderSpec s;
  s.kind = Kind::kGreedy;
  s.max_length = max_length;
  return s;
}

DecoderSpec DecoderSpec::sampling_top_k(std::size_t k, std::size_t max_length, std::uint64_t seed) {
  DecoderSpec s;
  s.kind = Kind::kTopK;
  s.top_k = k;
  s.max_length = max_length;
  s.seed = seed;
  return s;
}

DecoderSpec DecoderSpec::nucleus(double p, std::size_t max_length, std::uint64_t seed) {
  DecoderSpec s;
  s.kind = Kind::kNucleus;
  s.top_p = p;
  s.max_length = max_length;
  s.seed = seed;
  return s;
}

DecoderSpec DecoderSpec::typical(double tau, std::size_t max_length, std::uint64_t seed) {
  DecoderSpec s;
  s.kind = Kind::kTypical;
  s.typical_tau = tau;
  s.max_length = max_length;
  s.seed = seed;
  return s;
}

std::string_view decoder_kind_name(DecoderSpec::Kind kind) {
  switch (kind) {
    case DecoderSpec::Kind::kGreedy:
      return "greedy";
    case DecoderSpec::Kind::kTopK:
      return "top_k";
    case DecoderSpec::Kind::kNucleus:
      return "nucleus";
    case DecoderSpec::Kind::kTypical:
      return "typical";
  }
  return "nucleus";
}

DecoderSpec::Kind parse_decoder_kind(std::string_view name) {
  if (name == "greedy") return DecoderSpec::Kind::kGreedy;
  if (name == "top_k") return DecoderSpec::Kind::kTopK;
  if (name == "nucleus") return DecoderSpec::Kind::kNucleus;
  if (name == "typical") return DecoderSpec::Kind::kTypical;
  throw ConfigError("unknown decoder '" + std::string(name) + "'");
}

nlohmann::json decoder_to_json(const DecoderSpec& spec) {
  return nlohmann::json{{"kind", decoder_kind_name(spec.kind)},
                        {"top_k", spec.top_k},
                        {"top_p", spec.top_p},
                        {"typical_tau", spec.typical_tau},
                        {"temperature", spec.temperature},
                        {"max_length", spec.max_length},
                        {"seed", spec.seed}};
}

DecoderSpec decoder_from_json(const nlohmann::json& j) {
  try {
    DecoderSpec s;
    s.kind = parse_decoder_kind(j.at("kind").get<std::string>());
    s.top_k = j.at("top_k").get<std::size_t>();
    s.top_p = j.at("top_p").get<double>();
    s.typical_tau = j.at("typical_tau").get<double>();
    s.temperature = j.at("temperature").get<double>();
    s.max_length = j.at("max_length").get<std::size_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed decoder spec: ") + e.what());
  }
}

Distribution nucleus_filter(const Distribution& dist, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw DomainError("nucleus_filter: p must be in (0, 1]");
  return keep_prefix(dist, rank_by_probability(dist), p);
}

Distribution top_k_filter(const Distribution& dist, std::size_t k) {
  if (k < 1) throw DomainError("top_k_filter: k must be >= 1");
  const std::vector<std::size_t> ranked = rank_by_probability(dist);
  std::vector<double> out(dist.size(), 0.0);
  for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r) out[ranked[r]] = dist[ranked[r]];
  return Distribution::normalized(std::move(out));
}

Distribution typical_filter(const Distribution& dist, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw DomainError("typical_filter: tau must be in (0, 1]");
  const double h = dist.entropy();
  std::vector<std::size_t> ids = support(dist);
  std::vector<double> gap(dist.size(), 0.0);
  for (std::size_t i : ids) gap[i] = std::abs(-std::log(dist[i]) - h);
  std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return gap[a] < gap[b]; });
  return keep_prefix(dist, ids, tau);
}

Distribution apply_temperature(const Distribution& dist, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  if (temperature == 1.0) return dist;
  std::vector<double> logs(dist.size());
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < dist.size(); ++i) {
    logs[i] = dist[i] > 0.0 ? std::log(dist[i]) / temperature : -std::numeric_limits<double>::infinity();
    m = std::max(m, logs[i]);
  }
  std::vector<double> w(dist.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(logs[i] - m);
  return Distribution::normalized(std::move(w));
}

Distribution apply_decoder(const Distribution& dist, const DecoderSpec& spec) {
  const Distribution tempered = apply_temperature(dist, spec.temperature);
  switch (spec.kind) {
    case DecoderSpec::Kind::kGreedy:
      return Distribution::one_hot(dist.size(), dist.argmax());
    case DecoderSpec::Kind::kTopK:
      return top_k_filter(tempered, spec.top_k);
    case DecoderSpec::Kind::kNucleus:
      return nucleus_filter(tempered, spec.top_p);
    case DecoderSpec::Kind::kTypical:
      return typical_filter(tempered, spec.typical_tau);
  }
  return tempered;
}

TokenId sample_token(const Distribution& dist, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] <= 0.0) continue;
    last = i;
    cum += dist[i];
    if (u < cum) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(last);
}

TokenSeq sample_sequence(const SequencePolicy& policy, std::span<const TokenId> prompt, const DecoderSpec& spec,
                         Rng& rng) {
  spec.validate();
  TokenSeq out;
  while (out.size() < spec.max_length) {
    const Distribution filtered = apply_decoder(policy.next_dist(prompt, out), spec);
    const TokenId tok = spec.kind == DecoderSpec::Kind::kGreedy ? static_cast<TokenId>(filtered.argmax())
                                                                : sample_token(filtered, rng);
    out.push_back(tok);
    if (tok == Vocab::kEos) break;
  }
  return out;
}

TokenSeq sample_sequence(const SequencePolicy& policy, std::span<const TokenId> prompt, const DecoderSpec& spec) {
  Rng rng(spec.seed);
  return sample_sequence(policy, prompt, spec, rng);
}

}  // namespace ipa
