#pragma once

#include <optional>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "lmrl/tensor.hpp"

namespace lmrl {

enum class Activation { relu, gelu, tanh, identity };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation activation);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// x[m×in] · weight[in×out] + bias[out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Elementwise; both operands must have identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
/// x[m×n] + bias[n], broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor activate(const Tensor& x, Activation activation);

Tensor softmax(const Tensor& x, int axis);
/// Normalizes over the last axis, then applies gain and bias.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f);

/// Inverted dropout: kept entries are scaled by 1/(1-p).
Tensor dropout(const Tensor& x, float p, std::mt19937_64& rng);

// Shape plumbing.
Tensor reshape(const Tensor& x, Shape shape);
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor gather_rows(const Tensor& x, std::span<const int> rows);
/// Parts [m×n] each; output row r*k+p is row r of part p.
Tensor interleave_rows(std::span<const Tensor> parts);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Row-wise maximum of a 2-D tensor; the lowest column index wins ties.
Tensor row_max(const Tensor& x);
/// Each row divided by max(‖row‖₂, eps).
Tensor normalize_rows(const Tensor& x, float eps = 1e-8f);
/// Scalar cosine similarity of two equally shaped vectors.
Tensor cosine_similarity(const Tensor& z1, const Tensor& z2);

// Losses (scalar results).
Tensor mse_loss(const Tensor& pred, const Tensor& target);
/// Mean squared error over the rows whose weight is nonzero. Zero when no
/// row is selected.
Tensor masked_mse_loss(const Tensor& pred, const Tensor& target, std::span<const float> row_mask);
/// Mean over rows of -log softmax(logits)[target]; rows with target < 0 are
/// ignored.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
Tensor cross_entropy(const Tensor& logits, int target);

/// Post-softmax attention weights and the scaled, unmasked scores, each laid
/// out [batch][head][query][key].
struct AttentionCapture {
  int batch = 0;
  int heads = 0;
  int seq = 0;
  std::vector<float> weights;
  std::vector<float> scores;
};

struct AttentionShape {
  int batch = 1;
  int seq = 1;
  int heads = 1;
  /// Optional per-(batch, position) key validity. Queries never attend to
  /// invalid keys other than themselves.
  std::span<const float> key_valid;
};

/// Causal multi-head attention over packed qkv rows [batch*seq × 3n]:
/// softmax(q kᵀ/√d_head + mask) v per head, heads concatenated → [batch*seq × n].
Tensor causal_attention(const Tensor& qkv, const AttentionShape& shape, AttentionCapture* capture = nullptr);

}  // namespace lmrl
