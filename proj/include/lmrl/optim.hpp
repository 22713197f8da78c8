#pragma once

#include <string>
#include <vector>

#include "lmrl/tensor.hpp"

namespace lmrl {

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct AdamWConfig {
  float learning_rate = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 1e-4f;
  int warmup_steps = 0;
  float clip_norm = 0.25f;  // <= 0 disables clipping
};

/// Adaptive-moment optimizer with decoupled weight decay and a linear
/// warmup followed by a constant learning rate.
///
/// Only tensors with `requires_grad()` are updated; frozen parameters are
/// never touched, not even by weight decay.
class AdamW {
 public:
  struct Moments {
    std::string name;
    std::vector<float> first;
    std::vector<float> second;
  };

  AdamW(std::vector<NamedTensor> params, AdamWConfig config);

  /// Learning rate used by the `update`-th step (1-based).
  float learning_rate_at(long update) const;

  /// Clips, applies one update, clears grads. Returns the pre-clip global
  /// gradient norm.
  float step();
  void zero_grad();

  long steps_taken() const { return step_; }
  const AdamWConfig& config() const { return config_; }
  const std::vector<NamedTensor>& params() const { return params_; }
  const std::vector<Moments>& moments() const { return moments_; }
  void restore(long steps_taken, std::vector<Moments> moments);

 private:
  std::vector<NamedTensor> params_;
  AdamWConfig config_;
  std::vector<Moments> moments_;
  long step_ = 0;
};

/// Scales all present grads so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
float clip_grad_norm(std::vector<NamedTensor>& params, float max_norm);

}  // namespace lmrl
