#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "lmrl/finetune.hpp"

namespace lmrl {

struct Variant {
  std::string name;
  FinetuneConfig config;
  int language_model = 0;  // index into ExperimentInputs::language_models
};

struct ExperimentSpec {
  std::string recipe;
  FinetuneConfig base;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<int> contexts{5, 20};                         // "context" recipe
  std::vector<std::string> sizes{"micro", "mini", "chibit"};  // "model-size" recipe
};

/// dt-baseline, transfer, ablation, freeze, context, model-size.
const std::vector<std::string>& recipe_names();

/// Variant list of a recipe. `pretrained_sizes` names the checkpoints
/// available to the model-size recipe (one variant each).
std::vector<Variant> recipe_variants(const ExperimentSpec& spec, const std::vector<std::string>& pretrained_sizes = {});

struct ExperimentInputs {
  const Dataset* dataset = nullptr;
  std::vector<const Checkpoint*> language_models;
  const Corpus* corpus = nullptr;
};

struct ExperimentResult {
  std::string recipe;
  std::vector<EvalReport> reports;                            // one per variant
  std::vector<std::vector<std::vector<TrainMetric>>> metrics;  // [variant][seed]
};

using ExperimentObserver = std::function<void(const std::string& variant, const RunReport& run)>;

ExperimentResult run_experiment(const ExperimentSpec& spec, const ExperimentInputs& inputs,
                                const ExperimentObserver& observer = {});

/// "d<model_dim>-l<layers>-h<heads>", the label of a checkpoint's backbone.
std::string size_label(const TransformerConfig& config);

/// Writes <variant>.json reports, per-run metrics and curves under
/// <variant>/seed<k>/, comparison.csv and runs.csv. Returns the paths.
std::vector<std::filesystem::path> write_experiment(const ExperimentResult& result, const std::filesystem::path& dir);

/// One row per variant: best score per seed, median, 95% bootstrap CI,
/// median convergence step.
void write_comparison_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports);
/// Long format: variant, seed, step, normalized mean and std.
void write_runs_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports);

}  // namespace lmrl
