#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lmrl/tensor.hpp"

namespace lmrl {

/// (z1/‖z1‖)·(z2/‖z2‖). Zero vectors raise a degenerate-input error.
double cosine(std::span<const float> z1, std::span<const float> z2);

/// K-means centers of an embedding table, held fixed during finetuning.
struct EmbeddingAnchors {
  Tensor centers;  // [K × n]
  int k = 0;
  std::uint64_t source_checksum = 0;
  std::vector<double> objective_history;  // sum of squared distances per Lloyd iteration
  int iterations = 0;
};

/// FNV-1a over the raw float bytes of `table`.
std::uint64_t tensor_checksum(const Tensor& table);

struct KMeansOptions {
  int max_iterations = 100;
  double tolerance = 1e-6;  // relative objective change
};

/// Lloyd's algorithm from a k-means++ start. An emptied cluster is reseeded
/// with the point farthest from its current center.
EmbeddingAnchors kmeans(const Tensor& table, int k, std::uint64_t seed, KMeansOptions options = {});

enum class AnchorReduction {
  max,   // best-matching anchor per token
  mean,  // average similarity over anchors (reproduction flag only)
};

/// -Σ_i max_j cos(I_i, anchor_j) over the rows of `inputs` whose mask entry
/// is nonzero (all rows when `row_mask` is empty). Anchors are constants.
/// Ties go to the lowest anchor index.
Tensor l_cos(const Tensor& inputs, const Tensor& anchors, std::span<const float> row_mask = {},
             AnchorReduction reduction = AnchorReduction::max);

/// initial · max(0, 1 - step/decay_end_step); exactly 0 from decay_end_step on.
float lambda_schedule(long step, float initial, long decay_end_step);

struct LossConfig {
  float lambda1 = 0.1f;  // L_cos weight
  float lambda2 = 0.2f;  // L_LM weight
  long decay_end_step = 5000;
  int clusters = 100;
  int cotrain_batch = 16;  // language windows per step
  int cotrain_window = 32;

  void validate() const;
};

struct LossWeights {
  float lambda1 = 0.0f;
  float lambda2 = 0.0f;
};
LossWeights loss_weights(long step, const LossConfig& config);

/// L_MSE + λ1(step)·L_cos + λ2(step)·L_LM. A term whose weight is zero is
/// skipped entirely (its tensor may be undefined), so the result is then
/// exactly L_MSE.
Tensor combined_loss(const Tensor& mse, const Tensor& cos, const Tensor& lm, long step, const LossConfig& config);
double combined_loss_value(double mse, double cos, double lm, long step, const LossConfig& config);

}  // namespace lmrl
