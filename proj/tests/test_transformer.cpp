#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "lmrl/error.hpp"
#include "lmrl/gradcheck.hpp"
#include "lmrl/transformer.hpp"

using namespace lmrl;

namespace {

TransformerConfig small_config(int layers = 2, int heads = 2) {
  TransformerConfig c;
  c.model_dim = 8;
  c.num_heads = heads;
  c.num_layers = layers;
  c.max_positions = 16;
  c.vocab_size = 11;
  c.dropout = 0.0f;
  return c;
}

std::vector<int> iota_positions(int n) {
  std::vector<int> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  return p;
}

// Makes every weight nontrivial so gradient checks see real signal.
void randomize(Transformer& model, std::uint64_t seed, float range) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-range, range);
  for (auto& p : model.parameters()) {
    for (float& v : p.value.data()) v = dist(rng);
  }
}

}  // namespace

TEST_CASE("single-token attention reduces to the output projection of V") {
  Transformer model(small_config(1, 2), 1);
  randomize(model, 3, 0.5f);
  std::mt19937_64 rng(2);
  Tensor x = Tensor::uniform({1, 8}, -1, 1, rng);
  const auto pos = iota_positions(1);
  auto out = model.causal_self_attention(x, 0, {1, 1, pos, {}});

  const auto& w = model.weights().layers[0];
  auto qkv = linear(x, w.qkv_weight, w.qkv_bias);
  std::vector<float> v(qkv.data().begin() + 16, qkv.data().end());
  auto expected = linear(Tensor({1, 8}, v), w.proj_weight, w.proj_bias);
  for (int j = 0; j < 8; ++j) CHECK(out.at(j) == doctest::Approx(expected.at(j)).epsilon(1e-6));
}

TEST_CASE("identical tokens attend uniformly over the causal prefix") {
  Transformer model(small_config(1, 1), 4);
  randomize(model, 5, 0.5f);
  std::vector<float> row = {0.3f, -0.2f, 0.5f, 0.1f, -0.7f, 0.9f, 0.0f, 0.4f};
  std::vector<float> tokens;
  for (int t = 0; t < 5; ++t) tokens.insert(tokens.end(), row.begin(), row.end());
  AttentionCapture capture;
  const auto pos = iota_positions(5);
  model.causal_self_attention(Tensor({5, 8}, tokens), 0, {1, 5, pos, {}}, &capture);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 5; ++j) {
      const float p = capture.weights[static_cast<std::size_t>(i * 5 + j)];
      if (j <= i) {
        CHECK(p == doctest::Approx(1.0 / (i + 1)).epsilon(1e-6));
      } else {
        CHECK(p == 0.0f);
      }
    }
  }
}

TEST_CASE("attention rows are distributions and the first position sees only itself") {
  Transformer model(small_config(1, 2), 6);
  randomize(model, 7, 1.0f);
  std::mt19937_64 rng(8);
  Tensor x = Tensor::uniform({4, 8}, -1, 1, rng);
  AttentionCapture capture;
  const auto pos = iota_positions(4);
  model.causal_self_attention(x, 0, {1, 4, pos, {}}, &capture);
  for (int h = 0; h < 2; ++h) {
    for (int i = 0; i < 4; ++i) {
      double total = 0.0;
      for (int j = 0; j < 4; ++j) total += capture.weights[static_cast<std::size_t>((h * 4 + i) * 4 + j)];
      CHECK(std::abs(total - 1.0) <= 1e-6);
    }
    CHECK(capture.weights[static_cast<std::size_t>(h * 16)] == 1.0f);
  }
}

TEST_CASE("masked keys receive no attention") {
  std::mt19937_64 rng(9);
  Tensor qkv = Tensor::uniform({4, 6}, -1, 1, rng);
  const std::vector<float> valid = {0, 0, 1, 1};
  AttentionCapture capture;
  causal_attention(qkv, {1, 4, 1, valid}, &capture);
  CHECK(capture.weights[0] == 1.0f);                // padded query attends to itself
  CHECK(capture.weights[2 * 4 + 0] == 0.0f);        // real query ignores padding
  CHECK(capture.weights[2 * 4 + 1] == 0.0f);
  CHECK(capture.weights[2 * 4 + 2] == 1.0f);
  CHECK(capture.weights[3 * 4 + 2] + capture.weights[3 * 4 + 3] == doctest::Approx(1.0f));
}

TEST_CASE("feedforward contracts") {
  auto cfg = small_config(1, 1);
  Transformer model(cfg, 10);
  auto out = model.feedforward(Tensor::zeros({3, 8}), 0);
  for (float v : out.data()) CHECK(v == 0.0f);

  cfg.activation = Activation::identity;
  Transformer linear_model(cfg, 11);
  randomize(linear_model, 12, 0.5f);
  auto& w = linear_model.weights().layers[0];
  for (auto* b : {&w.ff1_bias, &w.ff2_bias}) {
    for (float& v : b->data()) v = 0.0f;
  }
  std::mt19937_64 rng(13);
  Tensor x = Tensor::uniform({2, 8}, -1, 1, rng);
  auto y = linear_model.feedforward(x, 0);
  auto expected = matmul(matmul(x, w.ff1_weight), w.ff2_weight);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.at(i) == doctest::Approx(expected.at(i)).epsilon(1e-5));

  Transformer relu_model(small_config(1, 1), 14);
  randomize(relu_model, 15, 0.5f);
  Tensor probe = Tensor::uniform({2, 8}, -1, 1, rng, true);
  std::vector<NamedTensor> inputs = relu_model.parameters();
  inputs.push_back({"x", probe});
  Tensor mix = Tensor::uniform({2, 8}, -1, 1, rng);
  auto results = check_gradients([&] { return sum(mul(relu_model.feedforward(probe, 0), mix)); }, inputs);
  CHECK(max_error(results) <= 2e-3);
}

TEST_CASE("empty stack reduces to layernorm of embedded input plus positions") {
  Transformer model(small_config(0, 1), 16);
  std::mt19937_64 rng(17);
  Tensor x = Tensor::uniform({3, 8}, -1, 1, rng);
  const std::vector<int> pos = {2, 3, 5};
  auto out = model.forward(x, {1, 3, pos, {}});
  std::vector<float> shifted(x.data().begin(), x.data().end());
  const auto p = model.weights().position_embedding.data();
  for (int r = 0; r < 3; ++r) {
    for (int j = 0; j < 8; ++j) shifted[static_cast<std::size_t>(r * 8 + j)] += p[static_cast<std::size_t>(pos[r] * 8 + j)];
  }
  auto expected = layernorm(Tensor({3, 8}, shifted), model.weights().final_gain, model.weights().final_bias);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.at(i) == expected.at(i));
}

TEST_CASE("forward captures one record per layer and is deterministic in eval mode") {
  Transformer model(small_config(3, 2), 18);
  std::mt19937_64 rng(19);
  Tensor x = Tensor::uniform({2 * 5, 8}, -1, 1, rng);
  const auto pos = iota_positions(5);
  AttentionRecord record;
  auto a = model.forward(x, {2, 5, pos, {}}, &record);
  REQUIRE(record.layers.size() == 3);
  for (const auto& layer : record.layers) {
    CHECK(layer.heads == 2);
    CHECK(layer.seq == 5);
    CHECK(layer.weights.size() == 2u * 2 * 5 * 5);
  }
  auto b = model.forward(x, {2, 5, pos, {}});
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_CASE("position overflow and ordering are rejected") {
  Transformer model(small_config(1, 1), 20);
  Tensor x = Tensor::zeros({2, 8});
  const std::vector<int> overflow = {15, 16};
  try {
    model.forward(x, {1, 2, overflow, {}});
    FAIL("expected context-length error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::context_length);
  }
  const std::vector<int> backwards = {3, 1};
  CHECK_THROWS_AS(model.forward(x, {1, 2, backwards, {}}), Error);
}

TEST_CASE("future tokens never influence earlier outputs") {
  Transformer model(small_config(2, 2), 21);
  randomize(model, 22, 0.6f);
  std::mt19937_64 rng(23);
  const auto pos = iota_positions(6);
  for (int t = 0; t < 6; ++t) {
    Tensor x = Tensor::uniform({6, 8}, -1, 1, rng);
    auto base = model.forward(x, {1, 6, pos, {}});
    Tensor y = x.clone();
    for (int j = 0; j < 8; ++j) y.data()[static_cast<std::size_t>(t * 8 + j)] += 5.0f;
    auto moved = model.forward(y, {1, 6, pos, {}});
    for (int i = 0; i < t * 8; ++i) CHECK(base.at(static_cast<std::size_t>(i)) == moved.at(static_cast<std::size_t>(i)));
  }
}

TEST_CASE("full transformer block gradients match finite differences") {
  Transformer model(small_config(1, 2), 24);
  randomize(model, 25, 0.5f);
  std::mt19937_64 rng(26);
  Tensor x = Tensor::uniform({2, 8}, -1, 1, rng, true);
  Tensor mix = Tensor::uniform({2, 8}, -1, 1, rng);
  const std::vector<int> pos = {0, 1};
  auto inputs = model.parameters();
  inputs.push_back({"x", x});
  auto results = check_gradients([&] { return sum(mul(model.forward(x, {1, 2, pos, {}}), mix)); }, inputs);
  for (const auto& r : results) {
    CAPTURE(r.name);
    CHECK(r.max_rel_error <= 2e-3);
  }
}

TEST_CASE("parameter count matches the closed form") {
  for (const char* name : {"micro", "mini", "chibit"}) {
    auto cfg = TransformerConfig::preset(name);
    Transformer model(cfg, 1);
    std::size_t total = 0;
    for (const auto& p : model.parameters()) total += p.value.size();
    CHECK(total == cfg.parameter_count());
  }
  const auto chibit = TransformerConfig::preset("chibit");
  CHECK(chibit.backbone_parameter_count() == 595072u);
  CHECK(std::abs(static_cast<double>(chibit.backbone_parameter_count()) - 596e3) / 596e3 < 0.01);
  CHECK_THROWS_AS(TransformerConfig::preset("huge"), Error);
}

TEST_CASE("freezing stops gradient flow into every backbone tensor") {
  Transformer model(small_config(1, 1), 27);
  model.set_frozen(true);
  for (const auto& p : model.parameters()) CHECK_FALSE(p.value.requires_grad());
  std::mt19937_64 rng(28);
  Tensor x = Tensor::uniform({3, 8}, -1, 1, rng, true);
  const auto pos = iota_positions(3);
  sum(model.forward(x, {1, 3, pos, {}})).backward();
  CHECK(x.has_grad());
  for (const auto& p : model.parameters()) CHECK_FALSE(p.value.has_grad());
  model.set_frozen(false);
  for (const auto& p : model.parameters()) CHECK(p.value.requires_grad());
}

TEST_CASE("dropout only applies in training mode") {
  auto cfg = small_config(1, 1);
  cfg.dropout = 0.5f;
  Transformer model(cfg, 29);
  std::mt19937_64 rng(30);
  Tensor x = Tensor::uniform({3, 8}, -1, 1, rng);
  const auto pos = iota_positions(3);
  auto eval_a = model.forward(x, {1, 3, pos, {}});
  model.set_training(true);
  auto train = model.forward(x, {1, 3, pos, {}});
  model.set_training(false);
  auto eval_b = model.forward(x, {1, 3, pos, {}});
  CHECK(std::equal(eval_a.data().begin(), eval_a.data().end(), eval_b.data().begin()));
  CHECK_FALSE(std::equal(eval_a.data().begin(), eval_a.data().end(), train.data().begin()));
}
