#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "lmrl/checkpoint.hpp"
#include "lmrl/envlab.hpp"
#include "lmrl/transformer.hpp"

namespace lmrl {

/// Which hidden states feed the action head.
enum class LossPositions {
  state_tokens,  // a_t from the s_t token only
  all_tokens,    // also a_t from R̂_t, and a_{t+1} from a_t
};

struct DecisionConfig {
  TransformerConfig backbone;
  int state_dim = 1;
  int action_dim = 1;  // continuous width, or number of discrete actions
  bool discrete = false;
  int max_timestep = 64;
  int context = 20;
  float rtg_scale = 1000.0f;
  LossPositions loss_positions = LossPositions::state_tokens;

  static DecisionConfig for_environment(const Environment& env, const TransformerConfig& backbone);
  void validate() const;
};

/// Padded window batch. Timesteps are left-padded to `context`; padded
/// steps carry zeros and mask 0.
struct TrajectoryBatch {
  int batch = 0;
  int context = 0;
  int state_dim = 0;
  int action_dim = 0;
  bool discrete = false;
  std::vector<float> returns;   // [B·K] R̂ / rtg_scale
  std::vector<float> states;    // [B·K·state_dim], raw
  std::vector<float> actions;   // [B·K·action_dim], one-hot when discrete
  std::vector<int> timesteps;   // [B·K]
  std::vector<float> step_mask; // [B·K]
  std::vector<int> action_ids;  // [B·K] discrete targets, -1 on padding

  int tokens_per_sample() const { return 3 * context; }
  /// [B·3K] validity per interleaved token.
  std::vector<float> token_mask() const;
  int valid_steps() const;
};

/// Interleaved position of each token, counted from the sample's first
/// unpadded token so left padding never shifts the real tokens; padded
/// tokens get 0.
std::vector<int> interleaved_positions(const TrajectoryBatch& batch);

/// Window of trajectory `traj` covering timesteps [end - len, end), len ≤ K.
void append_window(TrajectoryBatch& batch, const Trajectory& traj, int end, float rtg_scale);
TrajectoryBatch empty_batch(const DecisionConfig& config);

/// One window per trajectory, each ending at a uniformly drawn timestep.
TrajectoryBatch build_batch(std::span<const Trajectory* const> trajectories, const DecisionConfig& config,
                            std::mt19937_64& rng);
/// Draws `count` trajectories (uniformly, with replacement) and a window in each.
TrajectoryBatch sample_batch(std::span<const Trajectory> dataset, int count, const DecisionConfig& config,
                             std::mt19937_64& rng);

/// L_r, L_s, L_a, the action head, and the per-timestep embedding table.
struct ModalityProjections {
  Tensor return_weight, return_bias;  // [1 × n], [n]
  Tensor state_weight, state_bias;    // [state_dim × n], [n]
  Tensor action_weight, action_bias;  // [action_dim × n], [n]
  Tensor head_weight, head_bias;      // [n × action_dim], [action_dim]
  Tensor timestep_embedding;          // [max_timestep × n]

  ModalityProjections(const DecisionConfig& config, std::mt19937_64& rng);
  std::vector<NamedTensor> parameters() const;
};

struct StateNormalization {
  std::vector<float> mean;
  std::vector<float> stddev;

  static StateNormalization identity(int state_dim);
  static StateNormalization from_dataset(std::span<const Trajectory> dataset, int state_dim);
};

/// Trajectory model over interleaved (R̂_t, s_t, a_t) tokens on top of a
/// causal transformer backbone.
class DecisionModel {
 public:
  /// Fresh backbone drawn from `seed`.
  DecisionModel(const DecisionConfig& config, std::uint64_t seed);
  /// Adopts `backbone` (shares its weight storage); projections and
  /// timestep embeddings are fresh.
  DecisionModel(const DecisionConfig& config, Transformer backbone, std::uint64_t seed);

  const DecisionConfig& config() const { return config_; }
  Transformer& backbone() { return backbone_; }
  const Transformer& backbone() const { return backbone_; }
  ModalityProjections& projections() { return proj_; }
  const ModalityProjections& projections() const { return proj_; }

  void set_state_normalization(StateNormalization norm);
  const StateNormalization& state_normalization() const { return norm_; }

  /// Input representations I: modality projection plus timestep embedding,
  /// [B·3K × n] in (R̂, s, a) order.
  Tensor embed(const TrajectoryBatch& batch) const;
  /// Backbone hidden states for I at interleaved positions 0..3K-1.
  Tensor encode(const Tensor& inputs, const TrajectoryBatch& batch, AttentionRecord* record = nullptr);
  /// Action-head output at the s_t token, [B·K × action_dim]: tanh-squashed
  /// actions (continuous) or logits (discrete).
  Tensor predict_actions(const TrajectoryBatch& batch, AttentionRecord* record = nullptr);

  struct Output {
    Tensor inputs;   // I
    Tensor hidden;   // backbone output
    Tensor actions;  // head output at s tokens
  };
  Output run(const TrajectoryBatch& batch, AttentionRecord* record = nullptr);
  Tensor head(const Tensor& hidden_rows) const;

  void set_training(bool training) { backbone_.set_training(training); }
  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> projection_parameters() const;

 private:
  DecisionConfig config_;
  Transformer backbone_;
  ModalityProjections proj_;
  StateNormalization norm_;
};

/// L_MSE for continuous actions, cross-entropy for discrete, over unmasked
/// timesteps. A fully masked batch yields 0 and a warning on stderr.
Tensor action_loss(DecisionModel& model, const TrajectoryBatch& batch);
/// Same loss on an already computed forward pass.
Tensor action_loss(DecisionModel& model, const TrajectoryBatch& batch, const DecisionModel::Output& out);

Checkpoint make_decision_checkpoint(const DecisionModel& model, long step);
DecisionModel load_decision_model(const Checkpoint& checkpoint);

}  // namespace lmrl
