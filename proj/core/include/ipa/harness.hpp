// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "ipa/distill.hpp"
#include "ipa/rl.hpp"
#include "ipa/tasks.hpp"

namespace ipa {

enum class TaskKind { kForbiddenToken, kOrderedKeywords };

std::string_view task_name(TaskKind task);
/// ConfigError for names other than forbidden-token | ordered-keywords.
TaskKind parse_task(std::string_view name);

/// Architecture and MLE schedule of one language model; `checkpoint`, when
/// set, is loaded instead of training.
struct LmSpec {
  ModelConfig model;
  MleConfig mle;
  std::string checkpoint;
};

struct DistillSpec {
  std::size_t samples_per_prompt = 4;
  std::size_t num_prompts = 800;
  DecoderSpec decoder = DecoderSpec::nucleus(0.9, 14);
  std::size_t heldout_prompts = 100;
  std::size_t horizon = 12;
};

struct EvalSpec {
  std::size_t num_prompts = 40;
  std::size_t samples_per_prompt = 25;
  double threshold = 0.5;
  std::size_t num_instances = 200;
  DecoderSpec decoder = DecoderSpec::nucleus(0.9, 12);
};

struct ExperimentRecipe {
  std::string name = "recipe";
  TaskKind task = TaskKind::kForbiddenToken;
  VariantTag variant = VariantTag::kDirect;
  RlAlgorithm algorithm = RlAlgorithm::kQuark;
  std::uint64_t seed = 0;
  SyntheticCorpusSpec corpus;
  std::size_t prompt_length = 4;
  LmSpec base;
  /// Training base for transfer, student for distilled; unused for direct.
  LmSpec approximate;
  ModelConfig adapter;
  TrainConfig rl;
  DistillSpec distill;
  EvalSpec eval;

  ExperimentRecipe();

  /// ConfigError (stage "validate") for inconsistent settings or a missing
  /// checkpoint file. Runs before any compute.
  void validate() const;
  /// Every setting, for config echo and digests.
  nlohmann::json to_json() const;
  std::string digest() const;
};

/// Parses the INI-style format: [section] headers and `key = value` lines,
/// '#' or ';' comments. Unknown sections or keys are ConfigErrors.
ExperimentRecipe parse_recipe(std::string_view text);
ExperimentRecipe load_recipe(const std::filesystem::path& path);

/// Corpus seeds, model inits and RL streams all derive from recipe.seed.
std::uint64_t stage_seed(const ExperimentRecipe& recipe, std::string_view stage);

/// Runs validate -> corpus -> base -> training base -> rl -> assemble ->
/// evaluate, writing artifacts and report.json into `out_dir`. Failures carry
/// the stage name; artifacts already written are kept. StateError when
/// another run holds the directory lock. Progress lines go to `progress`.
nlohmann::json run_recipe(const ExperimentRecipe& recipe, const std::filesystem::path& out_dir,
                          std::ostream* progress = nullptr);

/// Report with every volatile field removed, serialised with sorted keys.
std::string canonical_report(const nlohmann::json& report);

struct ReportComparison {
  nlohmann::json diff;  // metric -> {a, b, abs_delta, rel_delta}
  std::string table;    // aligned plain-text rendering
  bool regression = false;
};

/// Per-metric deltas of b relative to a. A metric regresses when
/// |b - a| > tolerance (per-metric override, else `default_tolerance`).
/// ReportError when the metric key sets differ.
ReportComparison compare_report(const nlohmann::json& a, const nlohmann::json& b, double default_tolerance = 0.0,
                                const std::map<std::string, double>& tolerances = {});

// Building blocks shared by run_recipe and the CLI.

PolicyHandle train_language_model(const LmSpec& spec, const Vocab& vocab, std::span<const TokenSeq> train,
                                  std::uint64_t seed, std::ostream* progress = nullptr);
Vocab recipe_vocab(const ExperimentRecipe& recipe);
/// Training sequences, RL prompts and evaluation prompts of the recipe task.
struct TaskData {
  Vocab vocab;
  TokenSet toxic;
  std::vector<TokenSeq> train;
  std::vector<TokenSeq> rl_prompts;
  std::vector<TokenSeq> eval_prompts;
  std::vector<ConstraintInstance> eval_instances;
  std::size_t num_keywords = 0;
};
TaskData make_task_data(const ExperimentRecipe& recipe, const Corpus& corpus);
RewardSpec::Fn task_reward(const ExperimentRecipe& recipe, const TaskData& data, const PolicyHandle& reference);
/// Metrics of one policy on the recipe's evaluation set.
std::map<std::string, double> evaluate_policy(const ExperimentRecipe& recipe, const TaskData& data,
                                              const SequencePolicy& policy, const PolicyHandle& reference);

}  // namespace ipa
