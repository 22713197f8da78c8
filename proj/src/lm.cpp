#include "lmrl/lm.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "lmrl/error.hpp"
#include "lmrl/format.hpp"

namespace lmrl {

TokenSequence tokenize(std::string_view bytes, std::size_t source_offset) {
  TokenSequence seq;
  seq.source_offset = source_offset;
  seq.tokens.reserve(bytes.size());
  for (char c : bytes) seq.tokens.push_back(static_cast<unsigned char>(c));
  return seq;
}

std::string detokenize(const TokenSequence& sequence) {
  std::string out;
  out.reserve(sequence.tokens.size());
  for (int t : sequence.tokens) {
    if (t < 0 || t >= kByteVocab) fail(ErrorKind::vocabulary, "token " + std::to_string(t) + " is not a byte");
    out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

Corpus::Corpus(std::string bytes, double validation_fraction) : bytes_(std::move(bytes)) {
  if (validation_fraction <= 0.0 || validation_fraction >= 1.0) {
    fail(ErrorKind::config, "validation fraction must lie in (0, 1)");
  }
  if (bytes_.size() < 4) fail(ErrorKind::config, "corpus is too small to split");
  const auto val = std::max<std::size_t>(1, static_cast<std::size_t>(static_cast<double>(bytes_.size()) * validation_fraction));
  split_ = bytes_.size() - val;
}

Corpus Corpus::from_file(const std::filesystem::path& path, double validation_fraction) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::io, "cannot read corpus " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return Corpus(std::move(bytes), validation_fraction);
}

TokenSequence Corpus::sample_train_window(std::mt19937_64& rng, int length) const {
  const auto len = static_cast<std::size_t>(length);
  if (len > split_) fail(ErrorKind::config, "train split is shorter than one window");
  std::uniform_int_distribution<std::size_t> pick(0, split_ - len);
  const std::size_t start = pick(rng);
  return tokenize(std::string_view(bytes_).substr(start, len), start);
}

std::vector<TokenSequence> Corpus::validation_windows(int count, int length) const {
  const auto len = static_cast<std::size_t>(length);
  const std::size_t val_size = bytes_.size() - split_;
  if (len > val_size) fail(ErrorKind::config, "validation split is shorter than one window");
  const std::size_t span = val_size - len;
  std::vector<TokenSequence> out;
  for (int i = 0; i < count; ++i) {
    const std::size_t start = split_ + (count > 1 ? span * static_cast<std::size_t>(i) / static_cast<std::size_t>(count - 1) : 0);
    out.push_back(tokenize(std::string_view(bytes_).substr(start, len), start));
  }
  return out;
}

Tensor lm_loss(Transformer& model, std::span<const TokenSequence> windows) {
  if (windows.empty()) fail(ErrorKind::contract, "lm_loss needs at least one window");
  const std::size_t length = windows[0].tokens.size();
  if (length < 2) fail(ErrorKind::contract, "lm_loss window must hold at least 2 tokens");
  const int steps = static_cast<int>(length) - 1;
  const int batch = static_cast<int>(windows.size());
  std::vector<int> inputs, targets;
  inputs.reserve(static_cast<std::size_t>(batch) * steps);
  targets.reserve(inputs.capacity());
  for (const auto& w : windows) {
    if (w.tokens.size() != length) fail(ErrorKind::dimension, "lm_loss windows must share one length");
    inputs.insert(inputs.end(), w.tokens.begin(), w.tokens.end() - 1);
    targets.insert(targets.end(), w.tokens.begin() + 1, w.tokens.end());
  }
  for (int t : targets) {
    if (t < 0 || t >= kByteVocab) fail(ErrorKind::vocabulary, "target token " + std::to_string(t) + " is not a byte");
  }
  std::vector<int> positions(static_cast<std::size_t>(steps));
  std::iota(positions.begin(), positions.end(), 0);
  const Tensor hidden = model.forward(model.embed_tokens(inputs), {batch, steps, positions, {}});
  // Predictions range over the 256 byte ids; the padding row of E is never a target.
  std::vector<int> byte_rows(kByteVocab);
  std::iota(byte_rows.begin(), byte_rows.end(), 0);
  const Tensor head = gather_rows(model.weights().token_embedding, byte_rows);
  return cross_entropy(matmul(hidden, transpose(head)), targets);
}

Tensor lm_loss(Transformer& model, const TokenSequence& window) {
  return lm_loss(model, std::span<const TokenSequence>(&window, 1));
}

double unigram_entropy_bits(std::string_view bytes) {
  if (bytes.empty()) return 0.0;
  std::array<std::size_t, 256> counts{};
  for (char c : bytes) ++counts[static_cast<unsigned char>(c)];
  double h = 0.0;
  const double total = static_cast<double>(bytes.size());
  for (std::size_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log2(p);
  }
  return h;
}

PretrainConfig PretrainConfig::profile(std::string_view name) {
  PretrainConfig c;
  if (name == "desk") return c;
  if (name == "tiny") {
    c.model = TransformerConfig::preset("micro");
    c.window = 32;
    c.batch_windows = 8;
    c.steps = 200;
    c.warmup = 20;
    c.learning_rate = 1e-3f;
    c.eval_every = 50;
    c.validation_windows = 16;
    return c;
  }
  if (name == "paper") {
    c.window = 128;
    c.batch_windows = 512;  // 65536 tokens
    c.steps = 80000;
    c.warmup = 10000;
    c.eval_every = 5000;
    return c;
  }
  fail(ErrorKind::config, "unknown pretraining profile '" + std::string(name) + "'");
}

float validation_bits_per_byte(Transformer& model, const Corpus& corpus, int windows, int length) {
  NoGradGuard guard;
  const bool was_training = model.training();
  model.set_training(false);
  const auto val = corpus.validation_windows(windows, length);
  double total = 0.0;
  constexpr std::size_t chunk = 16;
  for (std::size_t i = 0; i < val.size(); i += chunk) {
    const std::size_t n = std::min(chunk, val.size() - i);
    total += static_cast<double>(lm_loss(model, std::span<const TokenSequence>(val.data() + i, n)).item()) * n;
  }
  model.set_training(was_training);
  return static_cast<float>(total / static_cast<double>(val.size()) / std::log(2.0));
}

Checkpoint make_lm_checkpoint(const Transformer& model, long step) {
  Checkpoint ckpt;
  ckpt.kind = "lm";
  ckpt.config = model.config();
  ckpt.tensors = snapshot_tensors(model.parameters());
  ckpt.step = step;
  return ckpt;
}

Transformer load_lm(const Checkpoint& checkpoint) {
  if (checkpoint.kind != "lm") fail(ErrorKind::format, "expected an lm checkpoint, got '" + checkpoint.kind + "'");
  Transformer model(checkpoint.config, 0);
  auto params = model.parameters();
  copy_tensors_from(checkpoint, params);
  return model;
}

PretrainResult pretrain(const PretrainConfig& config, const Corpus& corpus, const PretrainObserver& observer) {
  if (config.window < 2 || config.batch_windows < 1 || config.steps < 1) {
    fail(ErrorKind::config, "pretraining needs window >= 2, batch >= 1, steps >= 1");
  }
  if (config.window - 1 > config.model.max_positions) {
    fail(ErrorKind::context_length, "window " + std::to_string(config.window) + " exceeds max_positions");
  }
  if (corpus.train_end() < static_cast<std::size_t>(config.window)) {
    fail(ErrorKind::config, "corpus is too small for one training window");
  }
  Transformer model(config.model, config.seed);
  model.set_training(true);
  AdamW optimizer(model.parameters(), {config.learning_rate, 0.9f, 0.999f, 1e-8f, config.weight_decay,
                                       config.warmup, config.clip_norm});
  std::mt19937_64 rng(config.seed + 1);

  PretrainResult result;
  double running = 0.0;
  int running_count = 0;
  std::vector<TokenSequence> batch(static_cast<std::size_t>(config.batch_windows));
  for (int step = 1; step <= config.steps; ++step) {
    for (auto& w : batch) w = corpus.sample_train_window(rng, config.window);
    Tensor loss = lm_loss(model, batch);
    loss.backward();
    optimizer.step();
    running += loss.item();
    ++running_count;
    if (step % config.eval_every == 0 || step == config.steps) {
      PretrainMetric m;
      m.step = step;
      m.train_loss = static_cast<float>(running / running_count);
      m.val_bpb = validation_bits_per_byte(model, corpus, config.validation_windows, config.window);
      result.metrics.push_back(m);
      if (observer) observer(m);
      running = 0.0;
      running_count = 0;
    }
  }
  result.final_train_loss = result.metrics.back().train_loss;
  result.final_val_bpb = result.metrics.back().val_bpb;
  model.set_training(false);
  result.checkpoint = make_lm_checkpoint(model, config.steps);
  result.checkpoint.meta = {{"window", config.window}, {"seed", config.seed}, {"val_bpb", result.final_val_bpb}};
  result.checkpoint.rng_state = serialize_rng(rng);
  result.checkpoint.optimizer = OptimizerSnapshot{optimizer.steps_taken(), optimizer.moments()};
  return result;
}

void write_pretrain_metrics(const std::filesystem::path& path, const std::vector<PretrainMetric>& metrics) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::io, "cannot write metrics " + path.string());
  os << "step,train_loss,val_bpb\n";
  for (const auto& m : metrics) os << m.step << ',' << format_float(m.train_loss) << ',' << format_float(m.val_bpb) << '\n';
  if (!os) fail(ErrorKind::io, "failed writing metrics " + path.string());
}

}  // namespace lmrl
