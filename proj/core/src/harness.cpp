// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipa/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "ipa/checkpoint.hpp"
#include "ipa/metrics.hpp"

namespace ipa {
namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename Fn>
auto run_stage(std::string_view stage, std::ostream* progress, Fn&& fn) {
  if (progress) *progress << "[" << stage << "] start" << std::endl;
  try {
    return fn();
  } catch (Error& e) {
    if (e.stage().empty()) e.set_stage(std::string(stage));
    throw;
  }
}

// Exclusive marker file; removed when the run ends, successfully or not.
class DirectoryLock {
 public:
  explicit DirectoryLock(std::filesystem::path path) : path_(std::move(path)) {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw StateError("output directory is locked by another run (" + path_.string() + ")");
    std::fclose(f);
  }
  ~DirectoryLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

// ---- INI parsing ----------------------------------------------------------

std::size_t to_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

char to_char(const std::string& key, const std::string& v) {
  if (v.size() != 1) throw ConfigError(key + ": expected a single character, got '" + v + "'");
  return v[0];
}

using Setter = std::function<void(const std::string& key, const std::string& value)>;
using SectionTable = std::map<std::string, Setter>;

void model_keys(SectionTable& t, ModelConfig& m) {
  t["width"] = [&m](auto& k, auto& v) { m.width = to_size(k, v); };
  t["heads"] = [&m](auto& k, auto& v) { m.heads = to_size(k, v); };
  t["layers"] = [&m](auto& k, auto& v) { m.layers = to_size(k, v); };
  t["context"] = [&m](auto& k, auto& v) { m.context = to_size(k, v); };
  t["tie_embeddings"] = [&m](auto& k, auto& v) { m.tie_embeddings = to_bool(k, v); };
  t["init_std"] = [&m](auto& k, auto& v) { m.init_std = to_double(k, v); };
}

void lm_keys(SectionTable& t, LmSpec& s) {
  model_keys(t, s.model);
  t["steps"] = [&s](auto& k, auto& v) { s.mle.steps = to_size(k, v); };
  t["batch_size"] = [&s](auto& k, auto& v) { s.mle.batch_size = to_size(k, v); };
  t["learning_rate"] = [&s](auto& k, auto& v) { s.mle.learning_rate = to_double(k, v); };
  t["warmup_steps"] = [&s](auto& k, auto& v) { s.mle.warmup_steps = to_size(k, v); };
  t["heldout_fraction"] = [&s](auto& k, auto& v) { s.mle.heldout_fraction = to_double(k, v); };
  t["checkpoint"] = [&s](auto&, auto& v) { s.checkpoint = v; };
}

void decoder_keys(SectionTable& t, DecoderSpec& d) {
  t["decoder"] = [&d](auto&, auto& v) { d.kind = parse_decoder_kind(v); };
  t["top_k"] = [&d](auto& k, auto& v) { d.top_k = to_size(k, v); };
  t["nucleus_p"] = [&d](auto& k, auto& v) { d.top_p = to_double(k, v); };
  t["typical_tau"] = [&d](auto& k, auto& v) { d.typical_tau = to_double(k, v); };
  t["temperature"] = [&d](auto& k, auto& v) { d.temperature = to_double(k, v); };
  t["max_length"] = [&d](auto& k, auto& v) { d.max_length = to_size(k, v); };
}

nlohmann::json model_json(const ModelConfig& m) {
  return {{"width", m.width},     {"heads", m.heads},
          {"layers", m.layers},   {"context", m.context},
          {"tie_embeddings", m.tie_embeddings}, {"init_std", m.init_std}};
}

nlohmann::json lm_json(const LmSpec& s) {
  nlohmann::json j = model_json(s.model);
  j["steps"] = s.mle.steps;
  j["batch_size"] = s.mle.batch_size;
  j["learning_rate"] = s.mle.learning_rate;
  j["warmup_steps"] = s.mle.warmup_steps;
  j["heldout_fraction"] = s.mle.heldout_fraction;
  j["checkpoint"] = s.checkpoint;
  return j;
}

std::size_t test_split_size(const SyntheticCorpusSpec& c) {
  const auto n = static_cast<double>(c.num_sequences);
  const auto n_train = static_cast<std::size_t>(std::floor(c.train_fraction * n));
  const auto n_val =
      std::min(c.num_sequences - n_train, static_cast<std::size_t>(std::floor(c.val_fraction * n)));
  return c.num_sequences - n_train - n_val;
}

std::size_t longest_text(const ExperimentRecipe& r) {
  return r.corpus.max_length + (r.corpus.grammar == Grammar::kKeywords ? r.corpus.num_keywords + 1 : 0);
}

void check_model(const ModelConfig& m, const Vocab& vocab, std::string_view what, std::size_t needed_context) {
  ModelConfig c = m;
  c.vocab_size = vocab.size();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(what) + ": " + e.message());
  }
  if (c.context < needed_context) {
    throw ConfigError(std::string(what) + ": context " + std::to_string(c.context) + " is shorter than the " +
                      std::to_string(needed_context) + " tokens the recipe needs");
  }
}

Metadata digest_metadata(const std::string& digest) { return Metadata{{"recipe.digest", digest}}; }

PolicyHandle load_or_train(const LmSpec& spec, const TaskData& data, std::uint64_t seed, Role role,
                           std::ostream* progress) {
  if (!spec.checkpoint.empty()) {
    ModelConfig expected = spec.model;
    expected.vocab_size = data.vocab.size();
    LoadedCheckpoint loaded = load_checkpoint(spec.checkpoint, expected);
    if (!(loaded.handle.vocab() == data.vocab)) throw ConfigMismatch(spec.checkpoint + ": vocabulary differs from the task's");
    loaded.handle.set_role(role);
    return loaded.handle;
  }
  PolicyHandle h = train_language_model(spec, data.vocab, data.train, seed, progress);
  h.set_role(role);
  return h;
}

}  // namespace

std::string_view task_name(TaskKind task) {
  return task == TaskKind::kForbiddenToken ? "forbidden-token" : "ordered-keywords";
}

TaskKind parse_task(std::string_view name) {
  if (name == "forbidden-token") return TaskKind::kForbiddenToken;
  if (name == "ordered-keywords") return TaskKind::kOrderedKeywords;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected forbidden-token|ordered-keywords)");
}

ExperimentRecipe::ExperimentRecipe() {
  base.model.width = 32;
  base.model.heads = 2;
  base.model.layers = 2;
  base.model.context = 24;
  base.mle.steps = 600;
  approximate.model.width = 16;
  approximate.model.heads = 2;
  approximate.model.layers = 1;
  approximate.model.context = 24;
  approximate.mle.steps = 600;
  adapter.width = 16;
  adapter.heads = 2;
  adapter.layers = 1;
  adapter.context = 24;
  rl.total_steps = 600;
}

ExperimentRecipe parse_recipe(std::string_view text) {
  boost::property_tree::ptree tree;
  try {
    std::istringstream in{std::string(text)};
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  ExperimentRecipe r;
  std::map<std::string, SectionTable> tables;
  SectionTable& rec = tables["recipe"];
  rec["name"] = [&r](auto&, auto& v) { r.name = v; };
  rec["task"] = [&r](auto&, auto& v) { r.task = parse_task(v); };
  rec["variant"] = [&r](auto&, auto& v) { r.variant = parse_variant(v); };
  rec["algorithm"] = [&r](auto&, auto& v) { r.algorithm = parse_algorithm(v); };
  rec["seed"] = [&r](auto& k, auto& v) { r.seed = to_size(k, v); };

  SectionTable& cor = tables["corpus"];
  SyntheticCorpusSpec& c = r.corpus;
  cor["grammar"] = [&c](auto&, auto& v) { c.grammar = parse_grammar(v); };
  cor["alphabet"] = [&c](auto&, auto& v) { c.alphabet = v; };
  cor["toxic"] = [&c](auto&, auto& v) { c.toxic = v; };
  cor["injection_rate"] = [&c](auto& k, auto& v) { c.injection_rate = to_double(k, v); };
  cor["branching"] = [&c](auto& k, auto& v) { c.branching = to_size(k, v); };
  cor["period"] = [&c](auto&, auto& v) { c.period = v; };
  cor["num_sequences"] = [&c](auto& k, auto& v) { c.num_sequences = to_size(k, v); };
  cor["min_length"] = [&c](auto& k, auto& v) { c.min_length = to_size(k, v); };
  cor["max_length"] = [&c](auto& k, auto& v) { c.max_length = to_size(k, v); };
  cor["num_keywords"] = [&c](auto& k, auto& v) { c.num_keywords = to_size(k, v); };
  cor["copy_rate"] = [&c](auto& k, auto& v) { c.copy_rate = to_double(k, v); };
  cor["separator"] = [&c](auto& k, auto& v) { c.separator = to_char(k, v); };
  cor["cue"] = [&c](auto& k, auto& v) { c.cue = to_char(k, v); };
  cor["train_fraction"] = [&c](auto& k, auto& v) { c.train_fraction = to_double(k, v); };
  cor["val_fraction"] = [&c](auto& k, auto& v) { c.val_fraction = to_double(k, v); };
  cor["test_fraction"] = [&c](auto& k, auto& v) { c.test_fraction = to_double(k, v); };
  cor["prompt_length"] = [&r](auto& k, auto& v) { r.prompt_length = to_size(k, v); };

  lm_keys(tables["base"], r.base);
  lm_keys(tables["approximate"], r.approximate);
  model_keys(tables["adapter"], r.adapter);

  SectionTable& rl = tables["rl"];
  TrainConfig& t = r.rl;
  rl["kl_coefficient"] = [&t](auto& k, auto& v) { t.kl_coefficient = to_double(k, v); };
  rl["exploration_frequency"] = [&t](auto& k, auto& v) { t.exploration_frequency = to_size(k, v); };
  rl["quantiles"] = [&t](auto& k, auto& v) { t.quantiles = to_size(k, v); };
  rl["clip"] = [&t](auto& k, auto& v) { t.clip = to_double(k, v); };
  rl["rollouts_per_exploration"] = [&t](auto& k, auto& v) { t.rollouts_per_exploration = to_size(k, v); };
  rl["batch_size"] = [&t](auto& k, auto& v) { t.batch_size = to_size(k, v); };
  rl["total_steps"] = [&t](auto& k, auto& v) { t.total_steps = to_size(k, v); };
  rl["learning_rate"] = [&t](auto& k, auto& v) { t.learning_rate = to_double(k, v); };
  rl["warmup_steps"] = [&t](auto& k, auto& v) { t.warmup_steps = to_size(k, v); };
  rl["pool_capacity"] = [&t](auto& k, auto& v) { t.pool_capacity = to_size(k, v); };
  decoder_keys(rl, t.rollout_decoder);

  SectionTable& dis = tables["distill"];
  DistillSpec& d = r.distill;
  dis["samples_per_prompt"] = [&d](auto& k, auto& v) { d.samples_per_prompt = to_size(k, v); };
  dis["num_prompts"] = [&d](auto& k, auto& v) { d.num_prompts = to_size(k, v); };
  dis["heldout_prompts"] = [&d](auto& k, auto& v) { d.heldout_prompts = to_size(k, v); };
  dis["horizon"] = [&d](auto& k, auto& v) { d.horizon = to_size(k, v); };
  decoder_keys(dis, d.decoder);

  SectionTable& ev = tables["eval"];
  EvalSpec& e = r.eval;
  ev["num_prompts"] = [&e](auto& k, auto& v) { e.num_prompts = to_size(k, v); };
  ev["samples_per_prompt"] = [&e](auto& k, auto& v) { e.samples_per_prompt = to_size(k, v); };
  ev["threshold"] = [&e](auto& k, auto& v) { e.threshold = to_double(k, v); };
  ev["num_instances"] = [&e](auto& k, auto& v) { e.num_instances = to_size(k, v); };
  decoder_keys(ev, e.decoder);

  for (const auto& [section, body] : tree) {
    const auto table = tables.find(section);
    if (table == tables.end()) {
      if (!body.data().empty()) throw ConfigError("config: keys must live inside a [section] ('" + section + "')");
      throw ConfigError("config: unknown section [" + section + "]");
    }
    for (const auto& [key, value] : body) {
      const auto setter = table->second.find(key);
      if (setter == table->second.end()) throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
      try {
        setter->second(section + "." + key, value.data());
      } catch (const ConfigError&) {
        throw;
      } catch (const Error& err) {
        throw ConfigError(section + "." + key + ": " + err.message());
      }
    }
  }
  return r;
}

ExperimentRecipe load_recipe(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse_recipe(read_file(path));
}

void ExperimentRecipe::validate() const {
  try {
    if (name.empty()) throw ConfigError("recipe name must not be empty");
    corpus.validate();
    const bool keywords = task == TaskKind::kOrderedKeywords;
    if (keywords != (corpus.grammar == Grammar::kKeywords)) {
      throw ConfigError("task " + std::string(task_name(task)) + " does not fit grammar " +
                        std::string(grammar_name(corpus.grammar)));
    }
    if (!keywords && corpus.toxic.empty()) throw ConfigError("forbidden-token task needs toxic symbols");
    if (!keywords && (prompt_length < 1 || prompt_length > corpus.min_length)) {
      throw ConfigError("prompt_length must lie in [1, min_length]");
    }
    rl.validate();
    if (rl.quantiles > 64) throw ConfigError("quantiles must be <= 64");
    const Vocab vocab = recipe_vocab(*this);
    const std::size_t prompt = 1 + (keywords ? corpus.num_keywords + 1 : prompt_length);
    const std::size_t train_ctx = longest_text(*this) + 1;
    const std::size_t gen_len = std::max({rl.rollout_decoder.max_length, eval.decoder.max_length,
                                          variant == VariantTag::kDistilled ? distill.decoder.max_length : 0});
    const std::size_t gen_ctx = prompt + gen_len - 1;
    check_model(base.model, vocab, "base", std::max(train_ctx, gen_ctx));
    if (variant != VariantTag::kDirect) check_model(approximate.model, vocab, "approximate", std::max(train_ctx, gen_ctx));
    check_model(adapter, vocab, "adapter", gen_ctx + 1);
    for (const LmSpec* s : {&base, &approximate}) {
      if (s == &approximate && variant == VariantTag::kDirect) continue;
      if (!s->checkpoint.empty() && !std::filesystem::exists(s->checkpoint)) {
        throw ConfigError("checkpoint not found: " + s->checkpoint);
      }
      if (s->checkpoint.empty() && !(s->mle.learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
      if (!(s->mle.heldout_fraction >= 0.0 && s->mle.heldout_fraction < 1.0)) {
        throw ConfigError("heldout_fraction must lie in [0, 1)");
      }
      if (s->mle.batch_size < 1) throw ConfigError("batch_size must be positive");
    }
    try {
      eval.decoder.validate();
      distill.decoder.validate();
    } catch (const DomainError& e) {
      throw ConfigError(e.message());
    }
    if (eval.samples_per_prompt < 1) throw ConfigError("eval.samples_per_prompt must be positive");
    if (!(eval.threshold > 0.0 && eval.threshold < 1.0)) throw ConfigError("eval.threshold must lie in (0, 1)");
    const std::size_t test = test_split_size(corpus);
    const std::size_t wanted = keywords ? eval.num_instances : eval.num_prompts;
    if (wanted < 1 || wanted > test) {
      throw ConfigError("evaluation wants " + std::to_string(wanted) + " prompts but the test split has " +
                        std::to_string(test));
    }
    if (variant == VariantTag::kDistilled) {
      if (distill.samples_per_prompt < 1 || distill.num_prompts < 1) throw ConfigError("distill sizes must be positive");
      if (distill.horizon < 1 || distill.heldout_prompts < 1 || distill.heldout_prompts > test) {
        throw ConfigError("distill horizon and heldout_prompts must be positive and fit the test split");
      }
    }
  } catch (Error& e) {
    e.set_stage("validate");
    throw;
  }
}

nlohmann::json ExperimentRecipe::to_json() const {
  nlohmann::json j;
  j["recipe"] = {{"name", name},
                 {"task", task_name(task)},
                 {"variant", variant_name(variant)},
                 {"algorithm", algorithm_name(algorithm)},
                 {"seed", seed}};
  j["corpus"] = {{"grammar", grammar_name(corpus.grammar)},
                 {"alphabet", corpus.alphabet},
                 {"toxic", corpus.toxic},
                 {"injection_rate", corpus.injection_rate},
                 {"branching", corpus.branching},
                 {"period", corpus.period},
                 {"num_sequences", corpus.num_sequences},
                 {"min_length", corpus.min_length},
                 {"max_length", corpus.max_length},
                 {"num_keywords", corpus.num_keywords},
                 {"copy_rate", corpus.copy_rate},
                 {"separator", std::string(1, corpus.separator)},
                 {"cue", std::string(1, corpus.cue)},
                 {"train_fraction", corpus.train_fraction},
                 {"val_fraction", corpus.val_fraction},
                 {"test_fraction", corpus.test_fraction},
                 {"prompt_length", prompt_length}};
  j["base"] = lm_json(base);
  j["approximate"] = lm_json(approximate);
  j["adapter"] = model_json(adapter);
  j["rl"] = {{"kl_coefficient", rl.kl_coefficient},
             {"exploration_frequency", rl.exploration_frequency},
             {"quantiles", rl.quantiles},
             {"clip", rl.clip},
             {"rollouts_per_exploration", rl.rollouts_per_exploration},
             {"batch_size", rl.batch_size},
             {"total_steps", rl.total_steps},
             {"learning_rate", rl.learning_rate},
             {"warmup_steps", rl.effective_warmup()},
             {"pool_capacity", rl.pool_capacity},
             {"decoder", decoder_to_json(rl.rollout_decoder)}};
  j["distill"] = {{"samples_per_prompt", distill.samples_per_prompt},
                  {"num_prompts", distill.num_prompts},
                  {"heldout_prompts", distill.heldout_prompts},
                  {"horizon", distill.horizon},
                  {"decoder", decoder_to_json(distill.decoder)}};
  j["eval"] = {{"num_prompts", eval.num_prompts},
               {"samples_per_prompt", eval.samples_per_prompt},
               {"threshold", eval.threshold},
               {"num_instances", eval.num_instances},
               {"decoder", decoder_to_json(eval.decoder)}};
  return j;
}

std::string ExperimentRecipe::digest() const { return digest_hex(to_json().dump()); }

std::uint64_t stage_seed(const ExperimentRecipe& recipe, std::string_view stage) {
  return derive_seed(recipe.seed, {fnv1a(stage)});
}

Vocab recipe_vocab(const ExperimentRecipe& recipe) {
  return Vocab::from_alphabet(recipe.corpus.symbols(), static_cast<int>(recipe.rl.quantiles));
}

TaskData make_task_data(const ExperimentRecipe& recipe, const Corpus& corpus) {
  const int controls = static_cast<int>(recipe.rl.quantiles);
  TaskData d;
  if (recipe.task == TaskKind::kForbiddenToken) {
    ToxicityTask t = make_toxicity_task(recipe.corpus, corpus, controls, recipe.prompt_length);
    d.vocab = std::move(t.vocab);
    d.toxic = std::move(t.toxic);
    d.train = std::move(t.train);
    d.rl_prompts = std::move(t.train_prompts);
    const std::size_t n = std::min(recipe.eval.num_prompts, t.test_prompts.size());
    d.eval_prompts.assign(t.test_prompts.begin(), t.test_prompts.begin() + static_cast<std::ptrdiff_t>(n));
  } else {
    KeywordTask t = make_keyword_task(recipe.corpus, corpus, controls);
    d.vocab = std::move(t.vocab);
    d.num_keywords = t.num_keywords;
    d.train = std::move(t.train);
    d.rl_prompts = t.train_prompts();
    const std::size_t n = std::min(recipe.eval.num_instances, t.test_instances.size());
    d.eval_instances.assign(t.test_instances.begin(), t.test_instances.begin() + static_cast<std::ptrdiff_t>(n));
    for (const ConstraintInstance& c : d.eval_instances) d.eval_prompts.push_back(c.prompt);
  }
  return d;
}

RewardSpec::Fn task_reward(const ExperimentRecipe& recipe, const TaskData& data, const PolicyHandle& reference) {
  if (recipe.task == TaskKind::kForbiddenToken) {
    return toxicity_reward_spec(data.vocab, data.toxic).fn;
  }
  const std::size_t k = data.num_keywords;
  const CompositeReward reward({coverage_reward_spec([k](std::span<const TokenId> prompt) {
                                  if (prompt.size() < k + 1) throw DomainError("prompt too short to carry keywords");
                                  return TokenSeq(prompt.begin() + 1, prompt.begin() + 1 + static_cast<std::ptrdiff_t>(k));
                                }),
                                fluency_reward_spec(reference)});
  return [reward](std::span<const TokenId> p, std::span<const TokenId> o) { return reward(p, o); };
}

std::map<std::string, double> evaluate_policy(const ExperimentRecipe& recipe, const TaskData& data,
                                              const SequencePolicy& policy, const PolicyHandle& reference) {
  std::map<std::string, double> m;
  if (recipe.task == TaskKind::kForbiddenToken) {
    const ToxicityReport r = evaluate_toxicity(policy, data.eval_prompts, recipe.eval.samples_per_prompt,
                                               recipe.eval.threshold, recipe.eval.decoder, data.toxic, reference);
    m["avg_max_toxicity"] = r.avg_max_toxicity;
    m["toxicity_probability"] = r.toxicity_probability;
    m["dist_1"] = r.dist_1;
    m["dist_2"] = r.dist_2;
    m["dist_3"] = r.dist_3;
    m["perplexity"] = r.perplexity;
  } else {
    m["coverage_rate"] = coverage_rate(policy, data.eval_instances, recipe.eval.decoder);
    const SampleMatrix samples = sample_outputs(policy, data.eval_prompts, 1, recipe.eval.decoder);
    double fluency = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) fluency += fluency_proxy(reference, data.eval_prompts[i], samples[i][0]);
    m["fluency"] = fluency / static_cast<double>(samples.size());
    m["perplexity"] = perplexity(reference, data.eval_prompts, samples);
    m["dist_2"] = dist_n(samples, 2);
  }
  return m;
}

PolicyHandle train_language_model(const LmSpec& spec, const Vocab& vocab, std::span<const TokenSeq> train,
                                  std::uint64_t seed, std::ostream* progress) {
  PolicyHandle h = PolicyHandle::create(spec.model, vocab, Role::kBase, seed);
  MleConfig mle = spec.mle;
  mle.seed = derive_seed(seed, {1});
  const MleResult r = train_mle(h, as_mle_examples(train), mle);
  if (progress) {
    *progress << "  " << h.model().num_parameters() << " parameters, held-out nll " << std::fixed
              << std::setprecision(4) << r.initial_heldout_nll << " -> " << r.final_heldout_nll << std::endl;
  }
  return h;
}

nlohmann::json run_recipe(const ExperimentRecipe& recipe, const std::filesystem::path& out_dir,
                          std::ostream* progress) {
  run_stage("validate", progress, [&] { recipe.validate(); });
  const auto start = std::chrono::steady_clock::now();
  std::filesystem::create_directories(out_dir);
  DirectoryLock lock(out_dir / ".ipa.lock");
  const std::string digest = recipe.digest();
  const Metadata meta = digest_metadata(digest);

  const Corpus corpus = run_stage("corpus", progress, [&] {
    Corpus c = gen_corpus(recipe.corpus, stage_seed(recipe, "corpus"));
    write_corpus(out_dir / "corpus", c, digest);
    return c;
  });
  const TaskData data = make_task_data(recipe, corpus);

  PolicyHandle base = run_stage("base", progress, [&] {
    PolicyHandle h = load_or_train(recipe.base, data, stage_seed(recipe, "base"), Role::kBase, progress);
    h.freeze();
    save_checkpoint(h, out_dir / "base.ckpt", meta);
    return h;
  });

  std::map<std::string, double> metrics;
  PolicyHandle training_base = run_stage("training-base", progress, [&] {
    if (recipe.variant == VariantTag::kDirect) return base;
    if (recipe.variant == VariantTag::kTransfer) {
      PolicyHandle h = load_or_train(recipe.approximate, data, stage_seed(recipe, "approximate"), Role::kApproximate,
                                     progress);
      h.freeze();
      save_checkpoint(h, out_dir / "approximate.ckpt", meta);
      return h;
    }
    const std::size_t n = std::min(recipe.distill.num_prompts, data.rl_prompts.size());
    DecoderSpec kd = recipe.distill.decoder;
    kd.seed = stage_seed(recipe, "kd-corpus");
    KDCorpus corpus_kd = generate_kd_corpus(base, std::span(data.rl_prompts).first(n), recipe.distill.samples_per_prompt, kd);
    corpus_kd.recipe_digest = digest;
    write_file(out_dir / "kd_corpus.jsonl", corpus_kd.to_jsonl());

    PolicyHandle student;
    if (!recipe.approximate.checkpoint.empty()) {
      student = load_or_train(recipe.approximate, data, 0, Role::kApproximate, progress);
    } else {
      student = PolicyHandle::create(recipe.approximate.model, data.vocab, Role::kBase, stage_seed(recipe, "student"));
    }
    // Gap is measured on the test split so the student never saw those prompts.
    const std::vector<TokenSeq> heldout_all = recipe.task == TaskKind::kForbiddenToken
                                                  ? make_prompts(data.vocab, corpus.test, recipe.prompt_length)
                                                  : make_prompts(data.vocab, corpus.test, recipe.corpus.num_keywords + 1);
    const std::span<const TokenSeq> heldout =
        std::span(heldout_all).first(std::min(recipe.distill.heldout_prompts, heldout_all.size()));
    DecoderSpec gap_decoder = recipe.distill.decoder;
    gap_decoder.seed = stage_seed(recipe, "kd-gap");
    metrics["kd_gap.untrained"] = eval_kd_gap(base, student, heldout, recipe.distill.horizon, gap_decoder);
    if (recipe.approximate.checkpoint.empty()) {
      MleConfig mle = recipe.approximate.mle;
      mle.seed = stage_seed(recipe, "distill");
      const MleResult r = fit_approximate(student, corpus_kd, mle);
      if (progress) *progress << "  distilled nll " << r.initial_heldout_nll << " -> " << r.final_heldout_nll << std::endl;
    } else {
      student.set_role(Role::kApproximate);
      student.freeze();
    }
    metrics["kd_gap.distilled"] = eval_kd_gap(base, student, heldout, recipe.distill.horizon, gap_decoder);
    save_checkpoint(student, out_dir / "approximate.ckpt", meta);
    return student;
  });

  TrainResult trained = run_stage("rl", progress, [&] {
    PolicyHandle adapter = PolicyHandle::create(recipe.adapter, data.vocab, Role::kAdapter, stage_seed(recipe, "adapter"));
    TrainConfig cfg = recipe.rl;
    cfg.seed = stage_seed(recipe, "rl");
    std::ostringstream log;
    TrainResult r = train(recipe.algorithm, TailoredPolicy(training_base, adapter), task_reward(recipe, data, training_base),
                          data.rl_prompts, cfg, &log);
    std::istringstream lines(log.str());
    std::ostringstream tagged;
    for (std::string line; std::getline(lines, line);) {
      nlohmann::json j = nlohmann::json::parse(line);
      j["recipe_digest"] = digest;
      tagged << j.dump() << '\n';
    }
    write_file(out_dir / "train_log.jsonl", tagged.str());
    if (progress && !r.log.empty()) {
      *progress << "  " << r.log.size() << " exploration rounds, mean reward " << r.log.front().mean_reward << " -> "
                << r.log.back().mean_reward << std::endl;
    }
    return r;
  });

  TailoredPolicy deployed = run_stage("assemble", progress, [&] {
    TailoredPolicy t = assemble_variant(IpaVariant{recipe.variant, training_base}, base, trained.policy.adapter(),
                                        trained.policy.control_token());
    Metadata adapter_meta = t.manifest()->to_metadata();
    adapter_meta.insert(meta.begin(), meta.end());
    save_checkpoint(t.adapter(), out_dir / "adapter.ckpt", adapter_meta);
    return t;
  });

  run_stage("evaluate", progress, [&] {
    const LmPolicy base_policy(base);
    for (const auto& [k, v] : evaluate_policy(recipe, data, base_policy, base)) metrics["base." + k] = v;
    for (const auto& [k, v] : evaluate_policy(recipe, data, deployed, base)) metrics["tailored." + k] = v;
    const SampleMatrix samples = sample_outputs(deployed, data.eval_prompts, 1, recipe.eval.decoder);
    metrics["tailored.mean_kl"] = mean_kl_to_base(deployed, data.eval_prompts, samples);
    const std::string key = recipe.task == TaskKind::kForbiddenToken ? "toxicity_probability" : "coverage_rate";
    const double b = metrics["base." + key], t = metrics["tailored." + key];
    metrics["relative_change." + key] = b == 0.0 ? 0.0 : (t - b) / b;
  });

  nlohmann::json report;
  report["kind"] = "ipa_report";
  report["recipe"] = recipe.name;
  report["recipe_digest"] = digest;
  report["task"] = task_name(recipe.task);
  report["variant"] = variant_name(recipe.variant);
  report["algorithm"] = algorithm_name(recipe.algorithm);
  report["metrics"] = metrics;
  report["config"] = recipe.to_json();
  report["artifacts"] = {{"base_digest", deployed.manifest()->base_digest},
                         {"training_base_digest", deployed.manifest()->training_base_digest},
                         {"adapter_digest", deployed.manifest()->adapter_digest},
                         {"control_token", deployed.control_token() ? nlohmann::json(*deployed.control_token())
                                                                    : nlohmann::json(nullptr)},
                         {"exploration_rounds", trained.log.size()}};
  report["elapsed_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_file(out_dir / "report.json", report.dump(2) + "\n");
  if (progress) *progress << "[report] " << (out_dir / "report.json").string() << std::endl;
  return report;
}

std::string canonical_report(const nlohmann::json& report) {
  nlohmann::json r = report;
  r.erase("elapsed_seconds");
  return r.dump();
}

ReportComparison compare_report(const nlohmann::json& a, const nlohmann::json& b, double default_tolerance,
                                const std::map<std::string, double>& tolerances) {
  auto metrics_of = [](const nlohmann::json& r, const char* which) {
    if (!r.is_object() || !r.contains("metrics") || !r["metrics"].is_object()) {
      throw ReportError(std::string("report ") + which + " has no metrics object");
    }
    std::map<std::string, double> m;
    for (const auto& [k, v] : r["metrics"].items()) {
      if (!v.is_number()) throw ReportError(std::string("report ") + which + ": metric '" + k + "' is not a number");
      m[k] = v.get<double>();
    }
    return m;
  };
  const auto ma = metrics_of(a, "a"), mb = metrics_of(b, "b");
  std::string only_a, only_b;
  for (const auto& [k, v] : ma) {
    if (!mb.contains(k)) only_a += (only_a.empty() ? "" : ", ") + k;
  }
  for (const auto& [k, v] : mb) {
    if (!ma.contains(k)) only_b += (only_b.empty() ? "" : ", ") + k;
  }
  if (!only_a.empty() || !only_b.empty()) {
    throw ReportError("metric keys differ; only in a: [" + only_a + "], only in b: [" + only_b + "]");
  }

  ReportComparison out;
  out.diff = nlohmann::json::object();
  std::size_t width = 6;
  for (const auto& [k, v] : ma) width = std::max(width, k.size());
  std::ostringstream table;
  table << std::left << std::setw(static_cast<int>(width)) << "metric" << std::right << std::setw(14) << "a"
        << std::setw(14) << "b" << std::setw(14) << "abs_delta" << std::setw(12) << "rel_delta" << "\n";
  for (const auto& [k, va] : ma) {
    const double vb = mb.at(k);
    const double abs_delta = vb - va;
    const bool has_rel = va != 0.0;
    const double rel = has_rel ? abs_delta / std::abs(va) : 0.0;
    const auto tol = tolerances.find(k);
    const bool regressed = std::abs(abs_delta) > (tol == tolerances.end() ? default_tolerance : tol->second);
    out.regression = out.regression || regressed;
    out.diff[k] = {{"a", va},
                   {"b", vb},
                   {"abs_delta", abs_delta},
                   {"rel_delta", has_rel ? nlohmann::json(rel) : nlohmann::json(nullptr)},
                   {"regression", regressed}};
    std::ostringstream rel_text;
    if (has_rel) {
      rel_text << std::fixed << std::setprecision(1) << rel * 100.0 << "%";
    } else {
      rel_text << "n/a";
    }
    table << std::left << std::setw(static_cast<int>(width)) << k << std::right << std::fixed << std::setprecision(6)
          << std::setw(14) << va << std::setw(14) << vb << std::setw(14) << abs_delta << std::setw(12)
          << rel_text.str() << (regressed ? "  !" : "") << "\n";
  }
  out.table = table.str();
  return out;
}

}  // namespace ipa
