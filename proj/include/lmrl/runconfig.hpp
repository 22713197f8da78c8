#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "lmrl/finetune.hpp"

namespace lmrl {

/// Everything a command needs besides its subcommand. Serialized as a flat
/// JSON object; unknown keys are rejected.
struct RunConfig {
  std::string environment = "pointmass";
  std::string tier = "medium-expert";
  int episodes = 100;
  std::uint64_t data_seed = 0;
  std::string dataset;        // dataset stem; empty means generate from the fields above
  std::string lm_checkpoint;  // needed for pretrained init
  std::string corpus;         // empty means the bundled corpus
  int seeds = 5;              // experiments run seeds 0..seeds-1
  FinetuneConfig finetune;

  void validate() const;
};

nlohmann::ordered_json to_json(const RunConfig& config);
/// Overlays the keys of `j` onto `base`.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path);

std::string_view to_string(AnchorReduction reduction);
AnchorReduction parse_anchor_reduction(std::string_view name);
std::string_view to_string(LossPositions positions);
LossPositions parse_loss_positions(std::string_view name);

}  // namespace lmrl
