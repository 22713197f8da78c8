#include "lmrl/gradsuite.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <random>

#include "lmrl/aux.hpp"
#include "lmrl/gradcheck.hpp"
#include "lmrl/ops.hpp"
#include "lmrl/transformer.hpp"

namespace lmrl {

namespace {

Tensor random_input(Shape shape, std::mt19937_64& rng) { return Tensor::uniform(std::move(shape), -1.0f, 1.0f, rng, true); }

// Contracts against fixed random weights so every gradient entry matters.
Tensor project(const Tensor& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(out, Tensor::uniform(out.shape(), -1.0f, 1.0f, rng)));
}

}  // namespace

std::vector<OpCheck> run_gradient_suite(int seeds) {
  std::vector<std::string> order;
  std::map<std::string, double> worst;
  auto record = [&](const std::string& name, double err) {
    if (!worst.count(name)) order.push_back(name);
    worst[name] = std::max(worst[name], err);
  };

  for (int s = 0; s < seeds; ++s) {
    const auto seed = static_cast<std::uint64_t>(s);
    std::mt19937_64 rng(seed + 100);
    Tensor a = random_input({3, 4}, rng);
    Tensor b = random_input({4, 5}, rng);
    Tensor c = random_input({3, 4}, rng);
    Tensor bias = random_input({5}, rng);
    Tensor g = random_input({4}, rng);
    Tensor h = random_input({4}, rng);
    Tensor qkv = random_input({6, 12}, rng);
    Tensor table = random_input({6, 4}, rng);
    const Tensor anchors = Tensor::uniform({3, 4}, -1.0f, 1.0f, rng);
    const std::vector<int> ids = {5, 0, 5, 2};
    const std::vector<int> targets = {1, -1, 4};
    const std::vector<float> key_valid = {1, 1, 1, 0, 1, 1};
    const std::vector<float> rows = {1, 0, 1};
    std::vector<Tensor> parts = {a, c};

    const std::vector<std::pair<std::string, std::function<Tensor()>>> cases = {
        {"matmul", [&] { return project(matmul(a, b), seed); }},
        {"transpose", [&] { return project(transpose(a), seed); }},
        {"linear", [&] { return project(linear(a, b, bias), seed); }},
        {"add", [&] { return project(add(a, c), seed); }},
        {"sub", [&] { return project(sub(a, c), seed); }},
        {"mul", [&] { return project(mul(a, c), seed); }},
        {"scale", [&] { return project(scale(a, -1.5f), seed); }},
        {"add_row_bias", [&] { return project(add_row_bias(matmul(a, b), bias), seed); }},
        {"relu", [&] { return project(activate(a, Activation::relu), seed); }},
        {"gelu", [&] { return project(activate(a, Activation::gelu), seed); }},
        {"tanh", [&] { return project(activate(a, Activation::tanh), seed); }},
        {"softmax", [&] { return project(softmax(a, 1), seed); }},
        {"layernorm", [&] { return project(layernorm(a, g, h), seed); }},
        {"embedding", [&] { return project(embedding(table, ids), seed); }},
        {"interleave", [&] { return project(interleave_rows(parts), seed); }},
        {"mean", [&] { return mean(mul(a, c)); }},
        {"row_max", [&] { return project(row_max(a), seed); }},
        {"normalize_rows", [&] { return project(normalize_rows(a), seed); }},
        {"cosine", [&] { return cosine_similarity(g, h); }},
        {"mse", [&] { return mse_loss(a, c); }},
        {"masked_mse", [&] { return masked_mse_loss(a, c, rows); }},
        {"cross_entropy", [&] { return cross_entropy(matmul(a, b), targets); }},
        {"attention", [&] { return project(causal_attention(qkv, {2, 3, 2, key_valid}), seed); }},
        {"l_cos", [&] { return l_cos(a, anchors); }},
    };
    const std::vector<NamedTensor> inputs = {{"a", a},     {"b", b},     {"c", c},     {"bias", bias},
                                             {"g", g},     {"h", h},     {"qkv", qkv}, {"table", table}};
    for (const auto& [name, fn] : cases) record(name, max_error(check_gradients(fn, inputs)));

    TransformerConfig cfg;
    cfg.model_dim = 8;
    cfg.num_heads = 2;
    cfg.num_layers = 1;
    cfg.max_positions = 16;
    cfg.vocab_size = 11;
    cfg.dropout = 0.0f;
    // Finite differences straddle the ReLU kink on some draws; GELU keeps the block smooth.
    cfg.activation = Activation::gelu;
    Transformer model(cfg, seed);
    std::mt19937_64 wrng(seed + 500);
    std::uniform_real_distribution<float> dist(-0.5f, 0.5f);
    for (auto& p : model.parameters()) {
      for (float& v : p.value.data()) v = dist(wrng);
    }
    Tensor x = random_input({2, 8}, wrng);
    const std::vector<int> pos = {0, 1};
    auto block_inputs = model.parameters();
    block_inputs.push_back({"x", x});
    // The deep composition amplifies single-precision rounding in the
    // difference quotient; a wider step keeps that noise below truncation.
    record("transformer_block",
           max_error(check_gradients([&] { return project(model.forward(x, {1, 2, pos, {}}), seed); }, block_inputs,
                                     3e-3f)));
  }

  std::vector<OpCheck> out;
  for (const auto& name : order) out.push_back({name, worst[name], seeds});
  return out;
}

}  // namespace lmrl
