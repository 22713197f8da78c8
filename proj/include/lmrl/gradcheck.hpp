#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lmrl/optim.hpp"
#include "lmrl/tensor.hpp"

namespace lmrl {

struct GradCheckResult {
  std::string name;
  /// max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, max_i |analytic_i|, tiny):
  /// error measured against the tensor's gradient scale.
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

/// Central finite-difference oracle. `loss` must rebuild the graph from the
/// current contents of `inputs` on each call and return a scalar. The
/// difference quotient uses the step actually realized in single precision
/// and is evaluated in double.
std::vector<GradCheckResult> check_gradients(const std::function<Tensor()>& loss, std::vector<NamedTensor> inputs,
                                             float step = 1e-3f);

double max_error(const std::vector<GradCheckResult>& results);

}  // namespace lmrl
