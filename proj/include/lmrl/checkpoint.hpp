#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lmrl/optim.hpp"
#include "lmrl/transformer.hpp"

namespace lmrl {

struct OptimizerSnapshot {
  long steps_taken = 0;
  std::vector<AdamW::Moments> moments;
};

/// On-disk layout:
///   8 bytes  magic "LMRLCKPT"
///   u32 LE   format version
///   u64 LE   header length H
///   H bytes  JSON header: kind, config, meta, step, rng_state, and a tensor
///            directory of {name, shape, offset} (offset in floats from the
///            payload start)
///   payload  little-endian IEEE-754 single-precision values
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string kind = "lm";  // "lm" or "decision"
  TransformerConfig config;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;
  long step = 0;
  std::string rng_state;
  std::optional<OptimizerSnapshot> optimizer;

  const Tensor& tensor(const std::string& name) const;
  bool has_tensor(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json to_json(const TransformerConfig& config);
TransformerConfig transformer_config_from_json(const nlohmann::json& j);

/// Copies every tensor of `dst` from the checkpoint entry `prefix + name`.
/// Missing names and shape mismatches are format errors.
void copy_tensors_from(const Checkpoint& checkpoint, std::vector<NamedTensor>& dst, const std::string& prefix = "");

/// Deep copies of the tensors, detached from any graph.
std::vector<NamedTensor> snapshot_tensors(const std::vector<NamedTensor>& src, const std::string& prefix = "");

std::string serialize_rng(const std::mt19937_64& rng);
void deserialize_rng(const std::string& state, std::mt19937_64& rng);

}  // namespace lmrl
