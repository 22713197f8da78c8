#include "lmrl/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lmrl/error.hpp"

namespace lmrl {

void TransformerConfig::validate() const {
  if (model_dim <= 0 || num_heads <= 0 || num_layers < 0 || max_positions <= 0 || vocab_size <= 0) {
    fail(ErrorKind::config, "transformer dimensions must be positive");
  }
  if (model_dim % num_heads != 0) {
    fail(ErrorKind::config, "model_dim " + std::to_string(model_dim) + " is not divisible by num_heads " +
                                std::to_string(num_heads));
  }
  if (dropout < 0.0f || dropout >= 1.0f) fail(ErrorKind::config, "dropout must lie in [0, 1)");
}

std::size_t TransformerConfig::backbone_parameter_count() const {
  const std::size_t n = static_cast<std::size_t>(model_dim);
  return static_cast<std::size_t>(num_layers) * (12 * n * n + 13 * n) + 2 * n;
}

std::size_t TransformerConfig::parameter_count() const {
  const std::size_t n = static_cast<std::size_t>(model_dim);
  return static_cast<std::size_t>(vocab_size) * n + static_cast<std::size_t>(max_positions) * n +
         backbone_parameter_count();
}

TransformerConfig TransformerConfig::preset(std::string_view name) {
  TransformerConfig c;
  if (name == "chibit") return c;
  if (name == "micro") {
    c.model_dim = 32;
    c.num_heads = 1;
    c.num_layers = 2;
  } else if (name == "mini") {
    c.model_dim = 64;
    c.num_heads = 2;
    c.num_layers = 2;
  } else if (name == "3m") {
    c.model_dim = 256;
    c.num_heads = 4;
    c.num_layers = 4;
  } else if (name == "18m") {
    c.model_dim = 512;
    c.num_heads = 8;
    c.num_layers = 6;
  } else if (name == "84m") {
    c.model_dim = 768;
    c.num_heads = 12;
    c.num_layers = 12;
  } else {
    fail(ErrorKind::config, "unknown size preset '" + std::string(name) + "'");
  }
  return c;
}

Transformer::Transformer(const TransformerConfig& config, std::uint64_t seed)
    : config_(config), dropout_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int n = config_.model_dim;
  const int hidden = config_.hidden_dim();
  const float std_w = 0.02f;
  const float std_resid = 0.02f / std::sqrt(2.0f * std::max(1, config_.num_layers));

  weights_.token_embedding = Tensor::normal({config_.vocab_size, n}, std_w, rng, true);
  weights_.position_embedding = Tensor::normal({config_.max_positions, n}, 0.01f, rng, true);
  for (int l = 0; l < config_.num_layers; ++l) {
    LayerWeights w;
    w.ln1_gain = Tensor::full({n}, 1.0f, true);
    w.ln1_bias = Tensor::zeros({n}, true);
    w.qkv_weight = Tensor::normal({n, 3 * n}, std_w, rng, true);
    w.qkv_bias = Tensor::zeros({3 * n}, true);
    w.proj_weight = Tensor::normal({n, n}, std_resid, rng, true);
    w.proj_bias = Tensor::zeros({n}, true);
    w.ln2_gain = Tensor::full({n}, 1.0f, true);
    w.ln2_bias = Tensor::zeros({n}, true);
    w.ff1_weight = Tensor::normal({n, hidden}, std_w, rng, true);
    w.ff1_bias = Tensor::zeros({hidden}, true);
    w.ff2_weight = Tensor::normal({hidden, n}, std_resid, rng, true);
    w.ff2_bias = Tensor::zeros({n}, true);
    weights_.layers.push_back(std::move(w));
  }
  weights_.final_gain = Tensor::full({n}, 1.0f, true);
  weights_.final_bias = Tensor::zeros({n}, true);
}

std::vector<NamedTensor> Transformer::parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"wte", weights_.token_embedding});
  out.push_back({"wpe", weights_.position_embedding});
  for (std::size_t l = 0; l < weights_.layers.size(); ++l) {
    const auto& w = weights_.layers[l];
    const std::string p = "h." + std::to_string(l) + ".";
    out.push_back({p + "ln_1.gain", w.ln1_gain});
    out.push_back({p + "ln_1.bias", w.ln1_bias});
    out.push_back({p + "attn.qkv.weight", w.qkv_weight});
    out.push_back({p + "attn.qkv.bias", w.qkv_bias});
    out.push_back({p + "attn.proj.weight", w.proj_weight});
    out.push_back({p + "attn.proj.bias", w.proj_bias});
    out.push_back({p + "ln_2.gain", w.ln2_gain});
    out.push_back({p + "ln_2.bias", w.ln2_bias});
    out.push_back({p + "mlp.fc1.weight", w.ff1_weight});
    out.push_back({p + "mlp.fc1.bias", w.ff1_bias});
    out.push_back({p + "mlp.fc2.weight", w.ff2_weight});
    out.push_back({p + "mlp.fc2.bias", w.ff2_bias});
  }
  out.push_back({"ln_f.gain", weights_.final_gain});
  out.push_back({"ln_f.bias", weights_.final_bias});
  return out;
}

void Transformer::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (auto& p : parameters()) {
    p.value.set_requires_grad(!frozen);
    if (frozen) p.value.zero_grad();
  }
}

Transformer Transformer::clone() const {
  Transformer copy(config_, 0);
  auto dst = copy.parameters();
  const auto src = parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    std::copy(src[i].value.data().begin(), src[i].value.data().end(), dst[i].value.data().begin());
    dst[i].value.set_requires_grad(src[i].value.requires_grad());
  }
  copy.dropout_rng_ = dropout_rng_;
  copy.training_ = training_;
  copy.frozen_ = frozen_;
  return copy;
}

void Transformer::reinitialize_positions(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto fresh = Tensor::normal(weights_.position_embedding.shape(), 0.01f, rng);
  auto dst = weights_.position_embedding.data();
  const auto src = fresh.data();
  std::copy(src.begin(), src.end(), dst.begin());
}

Tensor Transformer::maybe_dropout(const Tensor& x) {
  if (!training_ || config_.dropout <= 0.0f) return x;
  return dropout(x, config_.dropout, dropout_rng_);
}

Tensor Transformer::embed_tokens(std::span<const int> ids) const { return embedding(weights_.token_embedding, ids); }

Tensor Transformer::lm_logits(const Tensor& hidden) const {
  return matmul(hidden, transpose(weights_.token_embedding));
}

Tensor Transformer::causal_self_attention(const Tensor& x, int layer, const SequenceLayout& layout,
                                          AttentionCapture* capture) {
  const auto& w = weights_.layers.at(static_cast<std::size_t>(layer));
  const Tensor qkv = linear(x, w.qkv_weight, w.qkv_bias);
  const Tensor mixed =
      causal_attention(qkv, AttentionShape{layout.batch, layout.seq, config_.num_heads, layout.key_valid}, capture);
  return linear(mixed, w.proj_weight, w.proj_bias);
}

Tensor Transformer::feedforward(const Tensor& x, int layer) {
  const auto& w = weights_.layers.at(static_cast<std::size_t>(layer));
  return linear(activate(linear(x, w.ff1_weight, w.ff1_bias), config_.activation), w.ff2_weight, w.ff2_bias);
}

Tensor Transformer::forward(const Tensor& embedded, const SequenceLayout& layout, AttentionRecord* record) {
  const int n = config_.model_dim;
  if (embedded.rank() != 2 || embedded.dim(1) != n || embedded.dim(0) != layout.batch * layout.seq) {
    fail(ErrorKind::dimension, "forward: embedded input " + shape_string(embedded.shape()) + " does not match " +
                                   std::to_string(layout.batch) + "x" + std::to_string(layout.seq) + " tokens of width " +
                                   std::to_string(n));
  }
  const auto tokens = static_cast<std::size_t>(layout.batch) * static_cast<std::size_t>(layout.seq);
  const bool per_token = layout.positions.size() == tokens &&
                         (layout.per_token_positions || tokens != static_cast<std::size_t>(layout.seq));
  if (!per_token && layout.positions.size() != static_cast<std::size_t>(layout.seq)) {
    fail(ErrorKind::dimension, "forward: need one position per sequence slot or per token");
  }
  for (std::size_t i = 0; i < layout.positions.size(); ++i) {
    const int p = layout.positions[i];
    if (p < 0 || p >= config_.max_positions) {
      fail(ErrorKind::context_length, "position " + std::to_string(p) + " exceeds max_positions " +
                                          std::to_string(config_.max_positions));
    }
    if (!per_token && i > 0 && p <= layout.positions[i - 1]) {
      fail(ErrorKind::contract, "positions must be strictly increasing");
    }
  }

  std::vector<int> rows;
  if (per_token) {
    rows.assign(layout.positions.begin(), layout.positions.end());
  } else {
    rows.reserve(tokens);
    for (int b = 0; b < layout.batch; ++b) {
      for (int p : layout.positions) rows.push_back(p);
    }
  }
  Tensor x = add(embedded, gather_rows(weights_.position_embedding, rows));
  x = maybe_dropout(x);

  if (record) record->layers.assign(static_cast<std::size_t>(config_.num_layers), AttentionCapture{});
  for (int l = 0; l < config_.num_layers; ++l) {
    const auto& w = weights_.layers[static_cast<std::size_t>(l)];
    AttentionCapture* capture = record ? &record->layers[static_cast<std::size_t>(l)] : nullptr;
    x = add(x, maybe_dropout(causal_self_attention(layernorm(x, w.ln1_gain, w.ln1_bias), l, layout, capture)));
    x = add(x, maybe_dropout(feedforward(layernorm(x, w.ln2_gain, w.ln2_bias), l)));
  }
  return layernorm(x, weights_.final_gain, weights_.final_bias);
}

}  // namespace lmrl
