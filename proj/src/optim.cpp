#include "lmrl/optim.hpp"

#include <algorithm>
#include <cmath>

#include "lmrl/error.hpp"

namespace lmrl {

AdamW::AdamW(std::vector<NamedTensor> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  moments_.reserve(params_.size());
  for (const auto& p : params_) {
    moments_.push_back({p.name, std::vector<float>(p.value.size(), 0.0f), std::vector<float>(p.value.size(), 0.0f)});
  }
}

float AdamW::learning_rate_at(long update) const {
  if (config_.warmup_steps <= 0) return config_.learning_rate;
  const double ramp = std::min(1.0, static_cast<double>(update) / config_.warmup_steps);
  return static_cast<float>(config_.learning_rate * ramp);
}

float clip_grad_norm(std::vector<NamedTensor>& params, float max_norm) {
  double sq = 0.0;
  for (auto& p : params) {
    if (!p.value.requires_grad() || !p.value.has_grad()) continue;
    for (float g : p.value.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0f && norm > max_norm) {
    const float factor = static_cast<float>(max_norm / (norm + 1e-6));
    for (auto& p : params) {
      if (!p.value.requires_grad() || !p.value.has_grad()) continue;
      for (float& g : p.value.grad()) g *= factor;
    }
  }
  return static_cast<float>(norm);
}

float AdamW::step() {
  const bool any_grad = std::any_of(params_.begin(), params_.end(), [](const NamedTensor& p) {
    return p.value.requires_grad() && p.value.has_grad();
  });
  if (!any_grad) fail(ErrorKind::missing_grad, "optimizer step called before backward: no parameter has a gradient");

  const float norm = clip_grad_norm(params_, config_.clip_norm);
  ++step_;
  const float lr = learning_rate_at(step_);
  const double bias1 = 1.0 - std::pow(static_cast<double>(config_.beta1), static_cast<double>(step_));
  const double bias2 = 1.0 - std::pow(static_cast<double>(config_.beta2), static_cast<double>(step_));
  const float b1 = config_.beta1, b2 = config_.beta2;

  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].value;
    if (!p.requires_grad()) continue;
    auto data = p.data();
    auto& m = moments_[i].first;
    auto& v = moments_[i].second;
    const bool has = p.has_grad();
    const float* g = has ? p.grad().data() : nullptr;
    for (std::size_t j = 0; j < data.size(); ++j) {
      const float gj = has ? g[j] : 0.0f;
      m[j] = b1 * m[j] + (1.0f - b1) * gj;
      v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
      const float mhat = static_cast<float>(m[j] / bias1);
      const float vhat = static_cast<float>(v[j] / bias2);
      data[j] -= lr * (mhat / (std::sqrt(vhat) + config_.eps) + config_.weight_decay * data[j]);
    }
  }
  zero_grad();
  return norm;
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

void AdamW::restore(long steps_taken, std::vector<Moments> moments) {
  if (moments.size() != moments_.size()) fail(ErrorKind::format, "optimizer state does not match parameter list");
  for (std::size_t i = 0; i < moments.size(); ++i) {
    if (moments[i].name != moments_[i].name || moments[i].first.size() != moments_[i].first.size() ||
        moments[i].second.size() != moments_[i].second.size()) {
      fail(ErrorKind::format, "optimizer moment mismatch for parameter '" + moments_[i].name + "'");
    }
  }
  moments_ = std::move(moments);
  step_ = steps_taken;
}

}  // namespace lmrl
