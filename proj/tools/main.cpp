// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0
//
// ipa: command-line driver for corpora, language models, adapters and
// experiment recipes. Exit codes: 0 success, 1 other failure, 2 configuration
// error, 3 numerical abort, 4 regression reported by `compare`.

#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "ipa/checkpoint.hpp"
#include "ipa/harness.hpp"

namespace fs = std::filesystem;
using namespace ipa;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitRegression = 4;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string base;
  std::string adapter;
  std::string variant = "direct";
  std::string corpus;
  std::string model = "base";
  std::string prompt;
  std::size_t samples = 1;
  std::string report_a, report_b;
  double tolerance = 0.0;
  std::string diff_out;
};

ExperimentRecipe recipe_from(const Options& o) {
  ExperimentRecipe r = o.config.empty() ? ExperimentRecipe{} : load_recipe(o.config);
  if (o.seed) r.seed = *o.seed;
  return r;
}

fs::path require_out(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  return o.out;
}

Corpus corpus_for(const ExperimentRecipe& r, const Options& o) {
  if (!o.corpus.empty()) return read_corpus(o.corpus);
  return gen_corpus(r.corpus, stage_seed(r, "corpus"));
}

PolicyHandle load_policy(const std::string& path, const Vocab& vocab) {
  if (path.empty()) throw ConfigError("a checkpoint path is required");
  LoadedCheckpoint c = load_checkpoint(path);
  if (!(c.handle.vocab() == vocab)) throw ConfigMismatch(path + ": vocabulary differs from the recipe's");
  return c.handle;
}

// Adapter checkpoint over `base`; the manifest decides the control token and
// must agree with the requested variant.
TailoredPolicy tailored_from(const Options& o, const PolicyHandle& base) {
  LoadedCheckpoint a = load_checkpoint(o.adapter);
  const VariantManifest m = VariantManifest::from_metadata(a.metadata);
  const VariantTag want = parse_variant(o.variant);
  const bool same = m.training_base_digest == policy_digest(base);
  if (want == VariantTag::kDirect && !same) {
    throw ConfigMismatch("adapter was trained against a different base; use --variant transfer or distilled");
  }
  if (want != VariantTag::kDirect && same) throw ConfigMismatch("adapter was trained against this base; use --variant direct");
  TailoredPolicy t(base, a.handle, m.control_token);
  VariantManifest deployed = m;
  deployed.tag = want;
  deployed.base_digest = policy_digest(base);
  t.set_manifest(deployed);
  return t;
}

int cmd_gen_corpus(const Options& o) {
  const ExperimentRecipe r = recipe_from(o);
  r.corpus.validate();
  const Corpus c = gen_corpus(r.corpus, stage_seed(r, "corpus"));
  write_corpus(require_out(o), c, r.digest());
  std::cout << "wrote " << c.train.size() << "/" << c.val.size() << "/" << c.test.size()
            << " train/val/test sequences to " << o.out << "\n";
  return 0;
}

int cmd_train_lm(const Options& o) {
  const ExperimentRecipe r = recipe_from(o);
  r.validate();
  if (o.model != "base" && o.model != "approximate") throw ConfigError("--model must be base or approximate");
  const TaskData data = make_task_data(r, corpus_for(r, o));
  const LmSpec& spec = o.model == "base" ? r.base : r.approximate;
  PolicyHandle h = train_language_model(spec, data.vocab, data.train, stage_seed(r, o.model), &std::cout);
  if (o.model == "approximate") h.set_role(Role::kApproximate);
  const fs::path out = require_out(o);
  fs::create_directories(out);
  save_checkpoint(h, out / (o.model + ".ckpt"), {{"recipe.digest", r.digest()}});
  std::cout << "saved " << (out / (o.model + ".ckpt")).string() << "\n";
  return 0;
}

int cmd_distill(const Options& o) {
  const ExperimentRecipe r = recipe_from(o);
  r.validate();
  const Corpus corpus = corpus_for(r, o);
  const TaskData data = make_task_data(r, corpus);
  PolicyHandle teacher = load_policy(o.base, data.vocab);
  teacher.freeze();
  DecoderSpec kd = r.distill.decoder;
  kd.seed = stage_seed(r, "kd-corpus");
  const std::size_t n = std::min(r.distill.num_prompts, data.rl_prompts.size());
  KDCorpus kdc = generate_kd_corpus(teacher, std::span(data.rl_prompts).first(n), r.distill.samples_per_prompt, kd);
  kdc.recipe_digest = r.digest();
  PolicyHandle student = PolicyHandle::create(r.approximate.model, data.vocab, Role::kBase, stage_seed(r, "student"));
  MleConfig mle = r.approximate.mle;
  mle.seed = stage_seed(r, "distill");
  const MleResult res = fit_approximate(student, kdc, mle);
  const fs::path out = require_out(o);
  fs::create_directories(out);
  write_file(out / "kd_corpus.jsonl", kdc.to_jsonl());
  save_checkpoint(student, out / "approximate.ckpt", {{"recipe.digest", r.digest()}});
  std::cout << kdc.pairs.size() << " teacher samples, student nll " << res.initial_heldout_nll << " -> "
            << res.final_heldout_nll << "\n";
  return 0;
}

int cmd_train_ipa(const Options& o) {
  const ExperimentRecipe r = recipe_from(o);
  r.validate();
  const TaskData data = make_task_data(r, corpus_for(r, o));
  PolicyHandle base = load_policy(o.base, data.vocab);
  PolicyHandle adapter = PolicyHandle::create(r.adapter, data.vocab, Role::kAdapter, stage_seed(r, "adapter"));
  TrainConfig cfg = r.rl;
  cfg.seed = stage_seed(r, "rl");
  const fs::path out = require_out(o);
  fs::create_directories(out);
  std::ofstream log(out / "train_log.jsonl");
  const TrainResult res = train(r.algorithm, TailoredPolicy(base, adapter), task_reward(r, data, base), data.rl_prompts,
                                cfg, &log);
  Metadata meta = res.policy.manifest()->to_metadata();
  meta["recipe.digest"] = r.digest();
  save_checkpoint(res.policy.adapter(), out / "adapter.ckpt", meta);
  if (!res.log.empty()) {
    std::cout << res.log.size() << " exploration rounds, mean reward " << res.log.front().mean_reward << " -> "
              << res.log.back().mean_reward << "\n";
  }
  std::cout << "saved " << (out / "adapter.ckpt").string() << "\n";
  return 0;
}

int cmd_generate(const Options& o) {
  const ExperimentRecipe r = recipe_from(o);
  const Vocab vocab = recipe_vocab(r);
  PolicyHandle base = load_policy(o.base, vocab);
  base.freeze();
  DecoderSpec dec = r.eval.decoder;
  dec.seed = o.seed.value_or(0);
  TokenSeq prompt{Vocab::kBos};
  const TokenSeq body = vocab.encode(o.prompt);
  prompt.insert(prompt.end(), body.begin(), body.end());
  std::optional<TailoredPolicy> tailored;
  if (!o.adapter.empty()) tailored.emplace(tailored_from(o, base));
  const LmPolicy plain(base);
  const SequencePolicy& policy = tailored ? static_cast<const SequencePolicy&>(*tailored) : plain;
  for (std::size_t i = 0; i < o.samples; ++i) {
    Rng rng(derive_seed(dec.seed, {i}));
    const TokenSeq y = sample_sequence(policy, prompt, dec, rng);
    std::cout << o.prompt << vocab.decode(strip_eos(y)) << "\n";
  }
  return 0;
}

int cmd_eval(const Options& o) {
  const ExperimentRecipe r = recipe_from(o);
  r.validate();
  const TaskData data = make_task_data(r, corpus_for(r, o));
  PolicyHandle base = load_policy(o.base, data.vocab);
  base.freeze();
  std::map<std::string, double> metrics;
  for (const auto& [k, v] : evaluate_policy(r, data, LmPolicy(base), base)) metrics["base." + k] = v;
  if (!o.adapter.empty()) {
    const TailoredPolicy t = tailored_from(o, base);
    for (const auto& [k, v] : evaluate_policy(r, data, t, base)) metrics["tailored." + k] = v;
    metrics["tailored.mean_kl"] = mean_kl_to_base(t, data.eval_prompts, sample_outputs(t, data.eval_prompts, 1, r.eval.decoder));
    const std::string key = r.task == TaskKind::kForbiddenToken ? "toxicity_probability" : "coverage_rate";
    const double b = metrics["base." + key], a = metrics["tailored." + key];
    metrics["relative_change." + key] = b == 0.0 ? 0.0 : (a - b) / b;
  }
  nlohmann::json report{{"kind", "ipa_report"}, {"recipe", r.name},   {"recipe_digest", r.digest()},
                        {"task", task_name(r.task)}, {"variant", o.variant}, {"metrics", metrics},
                        {"config", r.to_json()}};
  for (const auto& [k, v] : metrics) std::cout << k << " = " << v << "\n";
  if (!o.out.empty()) write_file(o.out, report.dump(2) + "\n");
  return 0;
}

int cmd_compare(const Options& o) {
  const auto parse = [](const std::string& path) {
    try {
      return nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw ReportError(path + ": " + e.what());
    }
  };
  const ReportComparison c = compare_report(parse(o.report_a), parse(o.report_b), o.tolerance);
  std::cout << c.table;
  if (!o.diff_out.empty()) write_file(o.diff_out, c.diff.dump(2) + "\n");
  return c.regression ? kExitRegression : 0;
}

int cmd_run_recipe(const Options& o) {
  const ExperimentRecipe r = recipe_from(o);
  const nlohmann::json report = run_recipe(r, require_out(o), &std::cout);
  for (const auto& [k, v] : report["metrics"].items()) std::cout << k << " = " << v << "\n";
  return 0;
}

int exit_code_for(const Error& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ConfigMismatch*>(&e) ||
      dynamic_cast<const FormatError*>(&e)) {
    return kExitConfig;
  }
  if (dynamic_cast<const NumericalError*>(&e) || dynamic_cast<const DegenerateProduct*>(&e) ||
      dynamic_cast<const InfiniteKL*>(&e)) {
    return kExitNumerical;
  }
  return kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inference-time policy adapters over small character language models"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "recipe file (INI)");
    sub->add_option("--seed", o.seed, "override the recipe seed");
  };

  CLI::App* gen = app.add_subcommand("gen-corpus", "write train/val/test JSONL corpora");
  common(gen);
  gen->add_option("--out", o.out, "output directory")->required();

  CLI::App* lm = app.add_subcommand("train-lm", "pretrain a language model on the recipe corpus");
  common(lm);
  lm->add_option("--out", o.out, "output directory")->required();
  lm->add_option("--corpus", o.corpus, "existing corpus directory");
  lm->add_option("--model", o.model, "which model section to train")->check(CLI::IsMember({"base", "approximate"}));

  CLI::App* dis = app.add_subcommand("distill", "sequence-level distillation of --base into an approximate policy");
  common(dis);
  dis->add_option("--base", o.base, "teacher checkpoint")->required();
  dis->add_option("--out", o.out, "output directory")->required();
  dis->add_option("--corpus", o.corpus, "existing corpus directory");

  CLI::App* ipa = app.add_subcommand("train-ipa", "RL-train an adapter against --base");
  common(ipa);
  ipa->add_option("--base", o.base, "training base checkpoint")->required();
  ipa->add_option("--out", o.out, "output directory")->required();
  ipa->add_option("--corpus", o.corpus, "existing corpus directory");

  CLI::App* gen_text = app.add_subcommand("generate", "sample continuations of a prompt");
  common(gen_text);
  gen_text->add_option("--base", o.base, "base checkpoint")->required();
  gen_text->add_option("--adapter", o.adapter, "adapter checkpoint");
  gen_text->add_option("--variant", o.variant, "direct|transfer|distilled")
      ->check(CLI::IsMember({"direct", "transfer", "distilled"}));
  gen_text->add_option("--prompt", o.prompt, "prompt text")->required();
  gen_text->add_option("--samples", o.samples, "number of samples");

  CLI::App* ev = app.add_subcommand("eval", "evaluate a base (and optional adapter) on the recipe task");
  common(ev);
  ev->add_option("--base", o.base, "base checkpoint")->required();
  ev->add_option("--adapter", o.adapter, "adapter checkpoint");
  ev->add_option("--variant", o.variant, "direct|transfer|distilled")
      ->check(CLI::IsMember({"direct", "transfer", "distilled"}));
  ev->add_option("--out", o.out, "report path");
  ev->add_option("--corpus", o.corpus, "existing corpus directory");

  CLI::App* cmp = app.add_subcommand("compare", "diff the metrics of two reports");
  cmp->add_option("a", o.report_a, "reference report")->required();
  cmp->add_option("b", o.report_b, "candidate report")->required();
  cmp->add_option("--tolerance", o.tolerance, "absolute tolerance before a delta counts as a regression");
  cmp->add_option("--out", o.diff_out, "write the JSON diff here");

  CLI::App* run = app.add_subcommand("run-recipe", "run a full experiment recipe");
  common(run);
  run->add_option("--out", o.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_corpus(o);
    if (*lm) return cmd_train_lm(o);
    if (*dis) return cmd_distill(o);
    if (*ipa) return cmd_train_ipa(o);
    if (*gen_text) return cmd_generate(o);
    if (*ev) return cmd_eval(o);
    if (*cmp) return cmd_compare(o);
    if (*run) return cmd_run_recipe(o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
