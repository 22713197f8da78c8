#include "lmrl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "lmrl/error.hpp"

namespace lmrl {

std::vector<GradCheckResult> check_gradients(const std::function<Tensor()>& loss, std::vector<NamedTensor> inputs,
                                             float step) {
  for (auto& in : inputs) {
    in.value.set_requires_grad(true);
    in.value.zero_grad();
  }
  loss().backward();

  std::vector<GradCheckResult> results;
  for (auto& in : inputs) {
    std::vector<float> analytic(in.value.size(), 0.0f);
    if (in.value.has_grad()) {
      auto g = in.value.grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
    std::vector<double> numeric(in.value.size());
    auto data = in.value.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const float original = data[i];
      const float up = original + step;
      const float down = original - step;
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard guard;
        data[i] = up;
        plus = loss().item();
        data[i] = down;
        minus = loss().item();
      }
      data[i] = original;
      numeric[i] = (plus - minus) / (static_cast<double>(up) - static_cast<double>(down));
    }
    double scale = 1e-12, worst = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      scale = std::max({scale, std::abs(numeric[i]), static_cast<double>(std::abs(analytic[i]))});
      worst = std::max(worst, std::abs(numeric[i] - analytic[i]));
    }
    results.push_back({in.name, worst / scale, worst});
  }
  for (auto& in : inputs) in.value.zero_grad();
  return results;
}

double max_error(const std::vector<GradCheckResult>& results) {
  double worst = 0.0;
  for (const auto& r : results) worst = std::max(worst, r.max_rel_error);
  return worst;
}

}  // namespace lmrl
