#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lmrl/checkpoint.hpp"
#include "lmrl/transformer.hpp"

namespace lmrl {

inline constexpr int kByteVocab = 256;
inline constexpr int kPadToken = 256;
inline constexpr int kLmVocab = 257;

struct TokenSequence {
  std::vector<int> tokens;
  std::size_t source_offset = 0;
};

/// Byte-level ids: byte b maps to token b.
TokenSequence tokenize(std::string_view bytes, std::size_t source_offset = 0);
std::string detokenize(const TokenSequence& sequence);

/// Raw bytes split into an ordered train prefix and a validation suffix.
class Corpus {
 public:
  Corpus(std::string bytes, double validation_fraction = 0.1);
  static Corpus from_file(const std::filesystem::path& path, double validation_fraction = 0.1);

  std::size_t size() const { return bytes_.size(); }
  std::size_t train_end() const { return split_; }
  std::string_view train() const { return std::string_view(bytes_).substr(0, split_); }
  std::string_view validation() const { return std::string_view(bytes_).substr(split_); }

  /// Uniformly placed window fully inside the train split.
  TokenSequence sample_train_window(std::mt19937_64& rng, int length) const;
  /// `count` evenly spaced windows covering the validation split.
  std::vector<TokenSequence> validation_windows(int count, int length) const;

 private:
  std::string bytes_;
  std::size_t split_ = 0;
};

/// Mean next-token cross entropy (nats) over `windows`, each of equal length
/// L ≥ 2: logits at position i-1 predict token i.
Tensor lm_loss(Transformer& model, std::span<const TokenSequence> windows);
Tensor lm_loss(Transformer& model, const TokenSequence& window);

/// Shannon entropy in bits of the byte histogram of `bytes`.
double unigram_entropy_bits(std::string_view bytes);

struct PretrainConfig {
  TransformerConfig model;
  int window = 64;
  int batch_windows = 32;
  int steps = 2000;
  int warmup = 200;
  float learning_rate = 3e-4f;
  float weight_decay = 1e-4f;
  float clip_norm = 0.25f;
  int eval_every = 250;
  int validation_windows = 64;
  std::uint64_t seed = 0;

  /// "desk" (the default above), "tiny" (seconds, for tests), or "paper"
  /// (65536-token batches, 80000 steps, 10000 warmup).
  static PretrainConfig profile(std::string_view name);
  int tokens_per_step() const { return window * batch_windows; }
};

struct PretrainMetric {
  int step = 0;
  float train_loss = 0.0f;
  float val_bpb = 0.0f;
};

struct PretrainResult {
  std::vector<PretrainMetric> metrics;
  float final_train_loss = 0.0f;
  float final_val_bpb = 0.0f;
  Checkpoint checkpoint;
};

/// Mean validation loss in bits per byte over evenly spaced windows.
float validation_bits_per_byte(Transformer& model, const Corpus& corpus, int windows, int length);

using PretrainObserver = std::function<void(const PretrainMetric&)>;

/// Fixed-seed training loop. Evaluates every `eval_every` steps and at the
/// end; the returned checkpoint holds weights, optimizer moments, and RNG.
PretrainResult pretrain(const PretrainConfig& config, const Corpus& corpus, const PretrainObserver& observer = {});

/// CSV with header `step,train_loss,val_bpb`.
void write_pretrain_metrics(const std::filesystem::path& path, const std::vector<PretrainMetric>& metrics);

Checkpoint make_lm_checkpoint(const Transformer& model, long step);
/// Builds a model from an "lm" checkpoint with bit-identical weights.
Transformer load_lm(const Checkpoint& checkpoint);

}  // namespace lmrl
