#pragma once

#include <string>
#include <vector>

namespace lmrl {

struct OpCheck {
  std::string op;
  double max_rel_error = 0.0;  // worst over seeds and inputs
  int seeds = 0;
};

/// Central-difference check of every differentiable op, the alignment loss,
/// and a full transformer block on random inputs in [-1, 1].
std::vector<OpCheck> run_gradient_suite(int seeds = 20);

}  // namespace lmrl
