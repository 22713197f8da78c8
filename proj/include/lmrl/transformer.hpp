#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lmrl/ops.hpp"
#include "lmrl/optim.hpp"
#include "lmrl/tensor.hpp"

namespace lmrl {

struct TransformerConfig {
  int model_dim = 128;
  int num_heads = 1;
  int num_layers = 3;
  int max_positions = 192;
  int vocab_size = 257;  // 256 byte ids plus one padding id
  float dropout = 0.1f;
  Activation activation = Activation::relu;

  void validate() const;
  int head_dim() const { return model_dim / num_heads; }
  int hidden_dim() const { return 4 * model_dim; }

  /// V·n + P·n + L·(12n² + 13n) + 2n. Per layer: two layernorms (4n),
  /// packed qkv (3n² + 3n), output projection (n² + n), feedforward
  /// (8n² + 5n); the final layernorm adds 2n; the LM head is tied to E.
  std::size_t parameter_count() const;
  /// Blocks plus final layernorm, excluding both embedding tables.
  std::size_t backbone_parameter_count() const;

  /// Named sizes: "chibit" (128/1/3), "3m" (256/4/4), "18m" (512/8/6),
  /// "84m" (768/12/12), plus desk toys "micro" (32/1/2) and "mini" (64/2/2).
  static TransformerConfig preset(std::string_view name);
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor qkv_weight, qkv_bias;    // Q, K, V projections packed as [n × 3n]
  Tensor proj_weight, proj_bias;  // attention output projection
  Tensor ln2_gain, ln2_bias;
  Tensor ff1_weight, ff1_bias;  // L1: n → 4n
  Tensor ff2_weight, ff2_bias;  // L2: 4n → n
};

struct TransformerWeights {
  Tensor token_embedding;     // E: [V × n], also the LM output head
  Tensor position_embedding;  // P: [max_positions × n]
  std::vector<LayerWeights> layers;
  Tensor final_gain, final_bias;
};

/// Attention captured during a forward pass, one entry per layer.
struct AttentionRecord {
  std::vector<AttentionCapture> layers;
};

struct SequenceLayout {
  int batch = 1;
  int seq = 1;
  /// Index into P: either `seq` strictly increasing entries shared across
  /// the batch, or one entry per token ([batch*seq]).
  std::span<const int> positions;
  /// Optional [batch*seq] key validity (0 marks padding).
  std::span<const float> key_valid;
  /// Forces the per-token reading of `positions` when batch is 1.
  bool per_token_positions = false;
};

/// GPT-style pre-layernorm causal transformer with learned absolute
/// positions and a token-embedding-tied LM head.
class Transformer {
 public:
  Transformer(const TransformerConfig& config, std::uint64_t seed);

  const TransformerConfig& config() const { return config_; }
  TransformerWeights& weights() { return weights_; }
  const TransformerWeights& weights() const { return weights_; }

  /// `embedded` is [batch*seq × n]; returns the final-layernorm hidden
  /// states with the same shape.
  Tensor forward(const Tensor& embedded, const SequenceLayout& layout, AttentionRecord* record = nullptr);

  Tensor causal_self_attention(const Tensor& x, int layer, const SequenceLayout& layout,
                               AttentionCapture* capture = nullptr);
  Tensor feedforward(const Tensor& x, int layer);

  Tensor embed_tokens(std::span<const int> ids) const;
  /// hidden · Eᵀ
  Tensor lm_logits(const Tensor& hidden) const;

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  /// Freezing excludes every block parameter, the final layernorm, and
  /// both embedding tables from gradient flow and optimizer updates.
  void set_frozen(bool frozen);
  bool frozen() const { return frozen_; }

  /// Replaces P with a fresh random table (the positional ablation).
  void reinitialize_positions(std::uint64_t seed);

  std::vector<NamedTensor> parameters() const;
  /// Independent copy of the weights (plain copies share storage).
  Transformer clone() const;
  std::mt19937_64& dropout_rng() { return dropout_rng_; }

 private:
  Tensor maybe_dropout(const Tensor& x);

  TransformerConfig config_;
  TransformerWeights weights_;
  std::mt19937_64 dropout_rng_;
  bool training_ = false;
  bool frozen_ = false;
};

}  // namespace lmrl
