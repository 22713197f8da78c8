#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lmrl/envlab.hpp"
#include "lmrl/traj.hpp"

namespace lmrl {

struct RolloutTrace {
  double episode_return = 0.0;
  std::vector<float> returns_to_go;  // R̂_t fed at each step (unscaled)
  std::vector<float> rewards;
  std::vector<float> actions;
};

/// Return-conditioned episodes run in lockstep. Each step feeds the last
/// min(K, t+1) timesteps, takes the predicted action (argmax when
/// discrete), and decrements R̂ by the observed reward.
std::vector<RolloutTrace> rollout_batch(DecisionModel& model, const Environment& env, float target_return, int context,
                                        std::span<const std::vector<float>> start_states);
RolloutTrace rollout(DecisionModel& model, const Environment& env, float target_return, int context,
                     std::span<const float> start_state);

/// Start states for evaluation episode `i` are fixed by (seed, i).
std::vector<std::vector<float>> evaluation_starts(const Environment& env, std::uint64_t seed, int episodes);

/// 100·(score − random)/(expert − random).
double normalized_score(double score, double random_score, double expert_score);

struct EvalPoint {
  long step = 0;
  std::vector<double> returns;
  double normalized_mean = 0.0;
  double normalized_std = 0.0;
};

/// First step whose mean normalized score is within 2 of the curve's best.
long convergence_step(std::span<const EvalPoint> curve, double tolerance = 2.0);
/// Same rule on bare (step, score) pairs.
long convergence_step(std::span<const long> steps, std::span<const double> scores, double tolerance = 2.0);
double best_score(std::span<const EvalPoint> curve);

struct ConfidenceInterval {
  double low = 0.0;
  double high = 0.0;
};

/// Percentile bootstrap of the mean: `resamples` draws of n indices with
/// replacement, percentiles by linear interpolation between order statistics.
ConfidenceInterval bootstrap_ci(std::span<const double> scores, int resamples = 2000, double level = 0.95,
                                std::uint64_t seed = 0);
/// Linear-interpolation percentile (q in [0, 1]) of sorted data.
double percentile_sorted(std::span<const double> sorted, double q);
double median(std::vector<double> values);

/// Head-averaged attention for one sample of the batch, per layer.
struct AttentionMaps {
  int seq = 0;
  std::vector<std::vector<float>> weights;     // as used in the forward pass
  std::vector<std::vector<float>> sharpened;   // softmax(scores / temperature)
  float temperature = 0.1f;
};

AttentionMaps attention_maps(const AttentionRecord& record, std::span<const float> key_valid, int sample = 0,
                             float temperature = 0.1f);
AttentionMaps attention_export(DecisionModel& model, const TrajectoryBatch& batch, float temperature = 0.1f,
                               int sample = 0);
/// Writes layer<l>.csv (weights), layer<l>_sharp.csv, and layer<l>.pgm
/// (sharpened map, upper triangle black). Returns the written paths.
std::vector<std::filesystem::path> write_attention(const AttentionMaps& maps, const std::filesystem::path& dir,
                                                   int cell_pixels = 4);

struct RunReport {
  std::uint64_t seed = 0;
  std::vector<EvalPoint> evaluations;
  long convergence_step = 0;
  double best_score = 0.0;
  double final_loss = 0.0;
};

struct EvalReport {
  std::string variant;
  std::string environment;
  std::string tier;
  std::vector<RunReport> runs;

  std::vector<std::uint64_t> seeds() const;
  double median_convergence_step() const;
  double median_best_score() const;
};

nlohmann::ordered_json to_json(const EvalReport& report);
void write_eval_report(const std::filesystem::path& path, const EvalReport& report);

}  // namespace lmrl
