#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lmrl {

enum class ActionKind { continuous, discrete };

struct StepResult {
  std::vector<float> next_state;
  float reward = 0.0f;
  bool done = false;
};

/// Deterministic toy environment. Discrete actions travel as a single float
/// holding the action index.
class Environment {
 public:
  virtual ~Environment() = default;

  virtual std::string name() const = 0;
  virtual int state_dim() const = 0;
  /// Continuous: action vector width. Discrete: number of actions.
  virtual int action_dim() const = 0;
  virtual ActionKind action_kind() const = 0;
  virtual int horizon() const = 0;
  /// Width of one stored action: action_dim() or 1 for discrete.
  int action_width() const { return action_kind() == ActionKind::discrete ? 1 : action_dim(); }

  virtual std::vector<float> reset(std::mt19937_64& rng) const = 0;
  /// `t` is the 0-based index of this step; `done` is set at the goal or
  /// when t + 1 reaches the horizon.
  virtual StepResult step(std::span<const float> state, std::span<const float> action, int t) const = 0;

  virtual std::vector<float> expert_action(std::span<const float> state) const = 0;
  virtual std::vector<float> random_action(std::mt19937_64& rng) const = 0;
  /// Expert corrupted by `noise`: Gaussian σ (continuous) or ε-greedy
  /// probability (discrete).
  virtual std::vector<float> noisy_action(std::span<const float> state, float noise, std::mt19937_64& rng) const = 0;
  /// Noise level whose behavior return sits near the random/expert midpoint.
  virtual float medium_noise() const = 0;
  /// Starting noise of the medium-replay improvement schedule.
  virtual float replay_start_noise() const = 0;
  /// Upper end of the calibration search interval.
  virtual float max_noise() const = 0;
};

/// 8×8 grid, start anywhere but the goal at (7,7). Actions 0..3 move
/// up/down/left/right (clamped at walls). Reward 1 on reaching the goal.
class GridWorld final : public Environment {
 public:
  static constexpr int kSize = 8;
  static constexpr int kHorizon = 20;
  static constexpr float kMediumEpsilon = 0.63f;

  std::string name() const override { return "gridworld"; }
  int state_dim() const override { return 2; }
  int action_dim() const override { return 4; }
  ActionKind action_kind() const override { return ActionKind::discrete; }
  int horizon() const override { return kHorizon; }
  std::vector<float> reset(std::mt19937_64& rng) const override;
  StepResult step(std::span<const float> state, std::span<const float> action, int t) const override;
  std::vector<float> expert_action(std::span<const float> state) const override;
  std::vector<float> random_action(std::mt19937_64& rng) const override;
  std::vector<float> noisy_action(std::span<const float> state, float noise, std::mt19937_64& rng) const override;
  float medium_noise() const override { return kMediumEpsilon; }
  float replay_start_noise() const override { return 1.0f; }
  float max_noise() const override { return 1.0f; }
};

/// Planar point mass: state (x, y, vx, vy), action = acceleration in
/// [-1,1]², semi-implicit Euler with dt = 0.1. Reward is minus the distance
/// to the origin after the move; the episode ends inside kGoalRadius.
class PointMass final : public Environment {
 public:
  static constexpr int kHorizon = 50;
  static constexpr float kDt = 0.1f;
  static constexpr float kGoalRadius = 0.05f;
  static constexpr float kMediumSigma = 3.3f;

  std::string name() const override { return "pointmass"; }
  int state_dim() const override { return 4; }
  int action_dim() const override { return 2; }
  ActionKind action_kind() const override { return ActionKind::continuous; }
  int horizon() const override { return kHorizon; }
  std::vector<float> reset(std::mt19937_64& rng) const override;
  StepResult step(std::span<const float> state, std::span<const float> action, int t) const override;
  std::vector<float> expert_action(std::span<const float> state) const override;
  std::vector<float> random_action(std::mt19937_64& rng) const override;
  std::vector<float> noisy_action(std::span<const float> state, float noise, std::mt19937_64& rng) const override;
  float medium_noise() const override { return kMediumSigma; }
  float replay_start_noise() const override { return 10.0f; }
  float max_noise() const override { return 10.0f; }
};

std::unique_ptr<Environment> make_environment(std::string_view name);

/// One episode. `actions` holds action_width floats per step.
struct Trajectory {
  int state_dim = 0;
  int action_width = 0;
  std::vector<float> states;
  std::vector<float> actions;
  std::vector<float> rewards;
  std::vector<float> returns_to_go;

  int length() const { return static_cast<int>(rewards.size()); }
  float episode_return() const;
};

/// Undiscounted suffix sums: out[i] = Σ_{t ≥ i} rewards[t].
std::vector<float> compute_returns_to_go(std::span<const float> rewards);

enum class BehaviorPolicy { random, expert, medium, replay };
std::string_view to_string(BehaviorPolicy policy);

/// Rolls one episode under `policy`; `noise` only matters for medium/replay.
Trajectory run_episode(const Environment& env, BehaviorPolicy policy, float noise, std::mt19937_64& rng);

struct ReferenceScores {
  double random_score = 0.0;
  double expert_score = 0.0;
};

/// Mean returns of the uniform-random policy and the scripted expert over
/// `episodes` seeded starts.
ReferenceScores reference_scores(const Environment& env, std::uint64_t seed, int episodes = 100);

/// Mean return of the noisy expert at `noise` over `episodes` starts.
double behavior_return(const Environment& env, float noise, std::uint64_t seed, int episodes);

/// Bisection on the noise level so the noisy expert's mean return lands at
/// the random/expert midpoint.
float calibrate_medium_noise(const Environment& env, std::uint64_t seed, int episodes = 200, int iterations = 30);

struct DatasetManifest {
  std::string environment;
  std::string tier;
  int episodes = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> behavior;  // policy label per episode
  std::vector<float> noise;           // noise level per episode
  double random_score = 0.0;
  double expert_score = 0.0;
  double mean_return = 0.0;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Trajectory> episodes;
};

bool valid_tier(std::string_view tier);

/// medium: noisy expert at the calibrated noise. medium-expert: the first
/// ⌈n/2⌉ episodes medium, the rest expert. medium-replay: noise annealed
/// linearly from a near-random level down to the medium level.
Dataset generate_dataset(const Environment& env, std::string_view tier, int episodes, std::uint64_t seed);

/// Writes `<stem>.jsonl` (one {states, actions, rewards} object per line,
/// shortest round-trip float text) and `<stem>.manifest.json`.
void save_dataset(const Dataset& dataset, const std::filesystem::path& stem);
Dataset load_dataset(const std::filesystem::path& stem);
std::filesystem::path episodes_path(const std::filesystem::path& stem);
std::filesystem::path manifest_path(const std::filesystem::path& stem);

}  // namespace lmrl
