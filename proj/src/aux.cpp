#include "lmrl/aux.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "lmrl/error.hpp"
#include "lmrl/ops.hpp"

namespace lmrl {

double cosine(std::span<const float> z1, std::span<const float> z2) {
  if (z1.size() != z2.size()) fail(ErrorKind::dimension, "cosine: vectors differ in length");
  double uu = 0.0, vv = 0.0, uv = 0.0;
  for (std::size_t i = 0; i < z1.size(); ++i) {
    uu += static_cast<double>(z1[i]) * z1[i];
    vv += static_cast<double>(z2[i]) * z2[i];
    uv += static_cast<double>(z1[i]) * z2[i];
  }
  if (uu == 0.0 || vv == 0.0) fail(ErrorKind::degenerate_input, "cosine of a zero vector");
  return std::clamp(uv / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

std::uint64_t tensor_checksum(const Tensor& table) {
  std::uint64_t h = 1469598103934665603ULL;
  for (float v : table.data()) {
    unsigned char bytes[sizeof(float)];
    std::memcpy(bytes, &v, sizeof(float));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

namespace {

double squared_distance(const float* a, const float* b, int n) {
  double s = 0.0;
  for (int j = 0; j < n; ++j) {
    const double d = static_cast<double>(a[j]) - b[j];
    s += d * d;
  }
  return s;
}

}  // namespace

EmbeddingAnchors kmeans(const Tensor& table, int k, std::uint64_t seed, KMeansOptions options) {
  if (table.rank() != 2) fail(ErrorKind::dimension, "kmeans expects a [V × n] table");
  const int rows = table.dim(0);
  const int n = table.dim(1);
  if (k < 1) fail(ErrorKind::config, "kmeans needs k >= 1");
  if (k > rows) fail(ErrorKind::config, "kmeans: k = " + std::to_string(k) + " exceeds " + std::to_string(rows) + " rows");
  const float* x = table.data().data();
  const auto un = static_cast<std::size_t>(n);
  auto row = [&](int i) { return x + static_cast<std::size_t>(i) * un; };

  std::mt19937_64 rng(seed);
  std::vector<float> centers(static_cast<std::size_t>(k) * un);
  auto center = [&](int c) { return centers.data() + static_cast<std::size_t>(c) * un; };

  // k-means++ seeding.
  std::vector<double> nearest(static_cast<std::size_t>(rows), std::numeric_limits<double>::infinity());
  std::uniform_int_distribution<int> first(0, rows - 1);
  int pick = first(rng);
  for (int c = 0; c < k; ++c) {
    std::copy(row(pick), row(pick) + n, center(c));
    double total = 0.0;
    for (int i = 0; i < rows; ++i) {
      nearest[static_cast<std::size_t>(i)] = std::min(nearest[static_cast<std::size_t>(i)], squared_distance(row(i), center(c), n));
      total += nearest[static_cast<std::size_t>(i)];
    }
    if (c + 1 == k) break;
    if (total <= 0.0) {
      // Every row already coincides with a center; take the next unused row.
      pick = (pick + 1) % rows;
      continue;
    }
    std::uniform_real_distribution<double> u(0.0, total);
    double r = u(rng);
    pick = rows - 1;
    for (int i = 0; i < rows; ++i) {
      r -= nearest[static_cast<std::size_t>(i)];
      if (r < 0.0 && nearest[static_cast<std::size_t>(i)] > 0.0) {
        pick = i;
        break;
      }
    }
  }

  EmbeddingAnchors out;
  out.k = k;
  out.source_checksum = tensor_checksum(table);
  std::vector<int> assign(static_cast<std::size_t>(rows), 0);
  std::vector<double> dist(static_cast<std::size_t>(rows), 0.0);
  std::vector<double> sums(centers.size());
  std::vector<int> counts(static_cast<std::size_t>(k));
  double previous = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < options.max_iterations; ++iter) {
    double objective = 0.0;
    for (int i = 0; i < rows; ++i) {
      int best = 0;
      double best_d = squared_distance(row(i), center(0), n);
      for (int c = 1; c < k; ++c) {
        const double d = squared_distance(row(i), center(c), n);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      assign[static_cast<std::size_t>(i)] = best;
      dist[static_cast<std::size_t>(i)] = best_d;
      objective += best_d;
    }
    out.objective_history.push_back(objective);
    out.iterations = iter + 1;
    const bool converged = std::isfinite(previous) &&
                           (previous - objective) <= options.tolerance * std::max(previous, 1e-300);
    if (converged || objective == 0.0) break;
    previous = objective;

    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (int i = 0; i < rows; ++i) {
      const auto c = static_cast<std::size_t>(assign[static_cast<std::size_t>(i)]);
      ++counts[c];
      for (int j = 0; j < n; ++j) sums[c * un + static_cast<std::size_t>(j)] += row(i)[j];
    }
    for (int c = 0; c < k; ++c) {
      const auto uc = static_cast<std::size_t>(c);
      if (counts[uc] == 0) {
        const auto far = std::max_element(dist.begin(), dist.end()) - dist.begin();
        std::copy(row(static_cast<int>(far)), row(static_cast<int>(far)) + n, center(c));
        dist[static_cast<std::size_t>(far)] = 0.0;
        continue;
      }
      for (int j = 0; j < n; ++j) {
        center(c)[j] = static_cast<float>(sums[uc * un + static_cast<std::size_t>(j)] / counts[uc]);
      }
    }
  }
  out.centers = Tensor({k, n}, std::move(centers));
  return out;
}

Tensor l_cos(const Tensor& inputs, const Tensor& anchors, std::span<const float> row_mask, AnchorReduction reduction) {
  if (inputs.rank() != 2 || anchors.rank() != 2) fail(ErrorKind::dimension, "l_cos expects rank-2 inputs and anchors");
  if (anchors.dim(0) < 1) fail(ErrorKind::contract, "l_cos needs at least one anchor");
  if (inputs.dim(1) != anchors.dim(1)) {
    fail(ErrorKind::dimension, "l_cos: inputs " + shape_string(inputs.shape()) + " vs anchors " + shape_string(anchors.shape()));
  }
  Tensor x = inputs;
  if (!row_mask.empty()) {
    if (row_mask.size() != static_cast<std::size_t>(inputs.dim(0))) fail(ErrorKind::dimension, "l_cos mask length mismatch");
    std::vector<int> rows;
    for (std::size_t i = 0; i < row_mask.size(); ++i) {
      if (row_mask[i] != 0.0f) rows.push_back(static_cast<int>(i));
    }
    if (rows.empty()) return Tensor::scalar(0.0f);
    x = gather_rows(inputs, rows);
  }
  Tensor unit_anchors;
  {
    NoGradGuard constant_anchors;
    unit_anchors = transpose(normalize_rows(anchors.detach()));
  }
  const Tensor sims = matmul(normalize_rows(x), unit_anchors);
  if (reduction == AnchorReduction::mean) return scale(sum(sims), -1.0f / static_cast<float>(anchors.dim(0)));
  return scale(sum(row_max(sims)), -1.0f);
}

float lambda_schedule(long step, float initial, long decay_end_step) {
  if (decay_end_step < 1) fail(ErrorKind::config, "decay_end_step must be at least 1");
  if (step >= decay_end_step) return 0.0f;
  if (step <= 0) return initial;
  return initial * (1.0f - static_cast<float>(static_cast<double>(step) / static_cast<double>(decay_end_step)));
}

void LossConfig::validate() const {
  if (lambda1 < 0.0f || lambda2 < 0.0f) fail(ErrorKind::config, "lambda weights must be non-negative");
  if (decay_end_step < 1) fail(ErrorKind::config, "decay_end_step must be at least 1");
  if (clusters < 1) fail(ErrorKind::config, "cluster count must be positive");
  if (cotrain_batch < 1 || cotrain_window < 2) fail(ErrorKind::config, "co-training batch needs windows of length >= 2");
}

LossWeights loss_weights(long step, const LossConfig& config) {
  return {lambda_schedule(step, config.lambda1, config.decay_end_step),
          lambda_schedule(step, config.lambda2, config.decay_end_step)};
}

Tensor combined_loss(const Tensor& mse, const Tensor& cos, const Tensor& lm, long step, const LossConfig& config) {
  const auto w = loss_weights(step, config);
  Tensor total = mse;
  if (w.lambda1 != 0.0f) total = add(total, scale(cos, w.lambda1));
  if (w.lambda2 != 0.0f) total = add(total, scale(lm, w.lambda2));
  return total;
}

double combined_loss_value(double mse, double cos, double lm, long step, const LossConfig& config) {
  const auto w = loss_weights(step, config);
  double total = mse;
  if (w.lambda1 != 0.0f) total += static_cast<double>(w.lambda1) * cos;
  if (w.lambda2 != 0.0f) total += static_cast<double>(w.lambda2) * lm;
  return total;
}

}  // namespace lmrl
