#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "lmrl/error.hpp"
#include "lmrl/lm.hpp"

using namespace lmrl;

namespace {

std::string repeated_pattern(std::size_t bytes) {
  const std::string unit = "the quick brown fox jumps over the lazy dog. ";
  std::string out;
  while (out.size() < bytes) out += unit;
  out.resize(bytes);
  return out;
}

TransformerConfig micro() {
  auto c = TransformerConfig::preset("micro");
  c.dropout = 0.0f;
  return c;
}

}  // namespace

TEST_CASE("byte tokenization") {
  CHECK(tokenize("abc").tokens == std::vector<int>{97, 98, 99});
  CHECK(tokenize("").tokens.empty());

  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> byte(0, 255);
  for (int trial = 0; trial < 20; ++trial) {
    std::string s(static_cast<std::size_t>(trial * 7), '\0');
    for (auto& c : s) c = static_cast<char>(byte(rng));
    CHECK(detokenize(tokenize(s)) == s);
  }
  TokenSequence bad{{300}, 0};
  CHECK_THROWS_AS(detokenize(bad), Error);
}

TEST_CASE("corpus split accounting keeps training out of validation bytes") {
  Corpus corpus(repeated_pattern(1000), 0.1);
  CHECK(corpus.train_end() == 900);
  CHECK(corpus.validation().size() == 100);
  CHECK(corpus.train().size() + corpus.validation().size() == corpus.size());
  std::mt19937_64 rng(2);
  for (int i = 0; i < 2000; ++i) {
    auto w = corpus.sample_train_window(rng, 32);
    CHECK(w.source_offset + w.tokens.size() <= corpus.train_end());
  }
  for (const auto& w : corpus.validation_windows(8, 32)) {
    CHECK(w.source_offset >= corpus.train_end());
    CHECK(w.source_offset + w.tokens.size() <= corpus.size());
  }
}

TEST_CASE("uniform predictor scores ln 256") {
  Transformer model(micro(), 3);
  for (float& v : model.weights().token_embedding.data()) v = 0.0f;
  const auto loss = lm_loss(model, tokenize("hello world")).item();
  CHECK(loss == doctest::Approx(std::log(256.0)).epsilon(1e-6));
  CHECK_THROWS_AS(lm_loss(model, tokenize("a")), Error);
}

TEST_CASE("loss decreases on a repeated-pattern corpus") {
  Corpus corpus(repeated_pattern(1024), 0.1);
  Transformer model(micro(), 4);
  AdamW opt(model.parameters(), {3e-3f, 0.9f, 0.999f, 1e-8f, 0.0f, 10, 1.0f});
  std::mt19937_64 rng(5);
  std::vector<float> losses;
  for (int step = 0; step < 200; ++step) {
    std::vector<TokenSequence> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(corpus.sample_train_window(rng, 24));
    Tensor loss = lm_loss(model, batch);
    loss.backward();
    opt.step();
    losses.push_back(loss.item());
  }
  const auto avg = [&](int from) {
    double s = 0.0;
    for (int i = from; i < from + 20; ++i) s += losses[static_cast<std::size_t>(i)];
    return s / 20.0;
  };
  CHECK(avg(180) < avg(0));
  CHECK(avg(180) < 0.5 * avg(0));
}

TEST_CASE("a 16-byte corpus is memorized") {
  const auto window = tokenize("sixteen bytes!!\n");
  REQUIRE(window.tokens.size() == 16);
  Transformer model(micro(), 6);
  AdamW opt(model.parameters(), {1e-2f, 0.9f, 0.999f, 1e-8f, 0.0f, 10, 1.0f});
  float loss = 0.0f;
  for (int step = 0; step < 400 && !(step > 0 && loss < 0.01f); ++step) {
    Tensor l = lm_loss(model, window);
    l.backward();
    opt.step();
    loss = l.item();
  }
  NoGradGuard guard;
  CHECK(lm_loss(model, window).item() < 0.05f);
}

TEST_CASE("pretraining is deterministic for a fixed seed") {
  Corpus corpus(repeated_pattern(4096), 0.1);
  auto cfg = PretrainConfig::profile("tiny");
  cfg.steps = 2;
  cfg.eval_every = 1;
  auto a = pretrain(cfg, corpus);
  auto b = pretrain(cfg, corpus);
  CHECK(a.final_train_loss == b.final_train_loss);
  CHECK(a.final_val_bpb == b.final_val_bpb);
  CHECK(a.metrics.size() == 2);
}

TEST_CASE("checkpoint round trip preserves forward outputs bit for bit") {
  Corpus corpus(repeated_pattern(4096), 0.1);
  auto cfg = PretrainConfig::profile("tiny");
  cfg.steps = 5;
  auto result = pretrain(cfg, corpus);
  const auto path = std::filesystem::temp_directory_path() / "lmrl_test_lm.ckpt";
  save_checkpoint(path, result.checkpoint);
  auto loaded = load_checkpoint(path);
  CHECK(loaded.optimizer.has_value());
  CHECK(loaded.step == 5);

  Transformer original = load_lm(result.checkpoint);
  Transformer restored = load_lm(loaded);
  const auto window = tokenize("the lazy dog jumps");
  NoGradGuard guard;
  CHECK(lm_loss(original, window).item() == lm_loss(restored, window).item());
  auto ids = window.tokens;
  std::vector<int> pos(ids.size());
  std::iota(pos.begin(), pos.end(), 0);
  const int len = static_cast<int>(ids.size());
  auto h1 = original.forward(original.embed_tokens(ids), {1, len, pos, {}});
  auto h2 = restored.forward(restored.embed_tokens(ids), {1, len, pos, {}});
  CHECK(std::equal(h1.data().begin(), h1.data().end(), h2.data().begin()));
  std::filesystem::remove(path);
}

TEST_CASE("learned corpus loss is permutation sensitive and non-negative") {
  Corpus corpus(repeated_pattern(2048), 0.1);
  auto cfg = PretrainConfig::profile("tiny");
  cfg.steps = 150;
  auto result = pretrain(cfg, corpus);
  Transformer model = load_lm(result.checkpoint);
  NoGradGuard guard;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto window = corpus.sample_train_window(rng, 32);
    auto shuffled = window;
    std::shuffle(shuffled.tokens.begin(), shuffled.tokens.end(), rng);
    const float ordered = lm_loss(model, window).item();
    CHECK(ordered >= 0.0f);
    CHECK(lm_loss(model, shuffled).item() > ordered);
  }
}

TEST_CASE("short pretraining on the bundled corpus beats the unigram entropy") {
  auto corpus = Corpus::from_file(std::filesystem::path(LMRL_DATA_DIR) / "corpus.txt");
  const double unigram = unigram_entropy_bits(corpus.validation());
  CHECK(unigram > 3.0);
  CHECK(unigram < 6.0);
  auto cfg = PretrainConfig::profile("tiny");
  auto result = pretrain(cfg, corpus);
  MESSAGE("tiny profile val bpb " << result.final_val_bpb << " vs unigram " << unigram);
  CHECK(result.final_val_bpb < unigram);
}

TEST_CASE("unigram entropy oracle") {
  CHECK(unigram_entropy_bits("aaaa") == 0.0);
  CHECK(unigram_entropy_bits("abab") == doctest::Approx(1.0));
  CHECK(unigram_entropy_bits("abcd") == doctest::Approx(2.0));
}
