#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lmrl/aux.hpp"
#include "lmrl/evalkit.hpp"
#include "lmrl/lm.hpp"
#include "lmrl/traj.hpp"

namespace lmrl {

enum class InitMode { random, pretrained };
std::string_view to_string(InitMode mode);
InitMode parse_init_mode(std::string_view name);

struct FinetuneConfig {
  int context = 20;
  int batch = 64;
  int steps = 10000;
  float learning_rate = 1e-4f;
  float weight_decay = 1e-4f;
  int warmup = 5000;
  float clip_norm = 0.25f;
  float dropout = 0.2f;
  LossConfig loss;
  AnchorReduction anchor_reduction = AnchorReduction::max;
  int anchor_refresh = 0;  // re-cluster E every this many steps; 0 keeps the initial anchors
  LossPositions loss_positions = LossPositions::state_tokens;
  InitMode init = InitMode::pretrained;
  bool frozen = false;
  bool random_positions = false;
  std::string size = "chibit";  // backbone preset for random init
  std::optional<float> rtg_scale;  // unset: the environment's return scale
  std::optional<float> target_return;  // defaults to the manifest's expert score
  int eval_every = 500;
  int eval_episodes = 10;
  int log_every = 50;
  std::uint64_t seed = 0;
  std::uint64_t eval_seed = 1234;

  void validate() const;
};

struct TrainMetric {
  long step = 0;
  float action_loss = 0.0f;
  float total_loss = 0.0f;
  float lambda1 = 0.0f;
  float lambda2 = 0.0f;
};

inline constexpr int kProbeWindows = 256;

struct FinetuneResult {
  std::vector<TrainMetric> metrics;
  RunReport report;
  float initial_action_loss = 0.0f;  // on a fixed probe batch (at least kProbeWindows) before any update
  float final_action_loss = 0.0f;    // same probe batch after training
  Checkpoint checkpoint;
};

struct FinetuneInputs {
  const Dataset* dataset = nullptr;
  const Checkpoint* language_model = nullptr;  // required for pretrained init
  const Corpus* corpus = nullptr;              // required when λ2 > 0
};

using FinetuneObserver = std::function<void(const EvalPoint&)>;

/// Divisor applied to returns-to-go: 10 for PointMass (returns in the tens),
/// 1 for GridWorld (returns in [0, 1]).
float default_rtg_scale(const Environment& env);

/// Builds the decision model the config asks for: a fresh backbone or one
/// adopted from the language-model checkpoint (dropout from the config,
/// optional positional re-initialization).
DecisionModel make_decision_model(const FinetuneConfig& config, const Environment& env, const Checkpoint* language_model);

FinetuneResult finetune(const FinetuneConfig& config, const FinetuneInputs& inputs,
                        const FinetuneObserver& observer = {});

EvalPoint evaluate_policy(DecisionModel& model, const Environment& env, const DatasetManifest& manifest,
                          float target_return, int context, int episodes, std::uint64_t seed, long step);

/// CSV with header `step,action_loss,total_loss,lambda1,lambda2`.
void write_train_metrics(const std::filesystem::path& path, const std::vector<TrainMetric>& metrics);
/// CSV with header `step,normalized_mean,normalized_std,returns`.
void write_eval_curve(const std::filesystem::path& path, const std::vector<EvalPoint>& curve);

}  // namespace lmrl
