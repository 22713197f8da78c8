#include "lmrl/runconfig.hpp"

#include <fstream>
#include <set>

#include "lmrl/error.hpp"
#include "lmrl/format.hpp"

namespace lmrl {

std::string_view to_string(AnchorReduction reduction) { return reduction == AnchorReduction::mean ? "mean" : "max"; }

AnchorReduction parse_anchor_reduction(std::string_view name) {
  if (name == "max") return AnchorReduction::max;
  if (name == "mean") return AnchorReduction::mean;
  fail(ErrorKind::config, "anchor_reduction must be 'max' or 'mean', got '" + std::string(name) + "'");
}

std::string_view to_string(LossPositions positions) {
  return positions == LossPositions::all_tokens ? "all" : "state";
}

LossPositions parse_loss_positions(std::string_view name) {
  if (name == "state") return LossPositions::state_tokens;
  if (name == "all") return LossPositions::all_tokens;
  fail(ErrorKind::config, "loss_positions must be 'state' or 'all', got '" + std::string(name) + "'");
}

void RunConfig::validate() const {
  finetune.validate();
  if (episodes < 1) fail(ErrorKind::config, "episodes must be >= 1");
  if (seeds < 1) fail(ErrorKind::config, "seeds must be >= 1");
  make_environment(environment);
}

namespace {

// Shortest decimal that reads back as the same float.
double num(float v) { return std::stod(format_float(v)); }

}  // namespace

nlohmann::ordered_json to_json(const RunConfig& c) {
  const auto& f = c.finetune;
  nlohmann::ordered_json j;
  j["environment"] = c.environment;
  j["tier"] = c.tier;
  j["episodes"] = c.episodes;
  j["data_seed"] = c.data_seed;
  j["dataset"] = c.dataset;
  j["lm_checkpoint"] = c.lm_checkpoint;
  j["corpus"] = c.corpus;
  j["seeds"] = c.seeds;
  j["context"] = f.context;
  j["batch"] = f.batch;
  j["steps"] = f.steps;
  j["learning_rate"] = num(f.learning_rate);
  j["weight_decay"] = num(f.weight_decay);
  j["warmup"] = f.warmup;
  j["clip_norm"] = num(f.clip_norm);
  j["dropout"] = num(f.dropout);
  j["lambda1"] = num(f.loss.lambda1);
  j["lambda2"] = num(f.loss.lambda2);
  j["decay_end_step"] = f.loss.decay_end_step;
  j["clusters"] = f.loss.clusters;
  j["cotrain_batch"] = f.loss.cotrain_batch;
  j["cotrain_window"] = f.loss.cotrain_window;
  j["anchor_reduction"] = to_string(f.anchor_reduction);
  j["anchor_refresh"] = f.anchor_refresh;
  j["loss_positions"] = to_string(f.loss_positions);
  j["init"] = to_string(f.init);
  j["frozen"] = f.frozen;
  j["random_positions"] = f.random_positions;
  j["size"] = f.size;
  j["rtg_scale"] = f.rtg_scale ? nlohmann::ordered_json(num(*f.rtg_scale)) : nlohmann::ordered_json(nullptr);
  j["target_return"] = f.target_return ? nlohmann::ordered_json(num(*f.target_return)) : nlohmann::ordered_json(nullptr);
  j["eval_every"] = f.eval_every;
  j["eval_episodes"] = f.eval_episodes;
  j["log_every"] = f.log_every;
  j["seed"] = f.seed;
  j["eval_seed"] = f.eval_seed;
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j, RunConfig c) {
  if (!j.is_object()) fail(ErrorKind::config, "run config must be a JSON object");
  static const std::set<std::string> known = [] {
    std::set<std::string> keys;
    const auto defaults = to_json(RunConfig{});
    for (const auto& [k, v] : defaults.items()) keys.insert(k);
    return keys;
  }();
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) fail(ErrorKind::config, "unknown config key '" + k + "'");
  }
  auto& f = c.finetune;
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    auto get_optional = [&](const char* key, std::optional<float>& field) {
      if (!j.contains(key)) return;
      if (j.at(key).is_null()) {
        field.reset();
      } else {
        field = j.at(key).get<float>();
      }
    };
    get("environment", c.environment);
    get("tier", c.tier);
    get("episodes", c.episodes);
    get("data_seed", c.data_seed);
    get("dataset", c.dataset);
    get("lm_checkpoint", c.lm_checkpoint);
    get("corpus", c.corpus);
    get("seeds", c.seeds);
    get("context", f.context);
    get("batch", f.batch);
    get("steps", f.steps);
    get("learning_rate", f.learning_rate);
    get("weight_decay", f.weight_decay);
    get("warmup", f.warmup);
    get("clip_norm", f.clip_norm);
    get("dropout", f.dropout);
    get("lambda1", f.loss.lambda1);
    get("lambda2", f.loss.lambda2);
    get("decay_end_step", f.loss.decay_end_step);
    get("clusters", f.loss.clusters);
    get("cotrain_batch", f.loss.cotrain_batch);
    get("cotrain_window", f.loss.cotrain_window);
    if (j.contains("anchor_reduction")) f.anchor_reduction = parse_anchor_reduction(j.at("anchor_reduction").get<std::string>());
    get("anchor_refresh", f.anchor_refresh);
    if (j.contains("loss_positions")) f.loss_positions = parse_loss_positions(j.at("loss_positions").get<std::string>());
    if (j.contains("init")) f.init = parse_init_mode(j.at("init").get<std::string>());
    get("frozen", f.frozen);
    get("random_positions", f.random_positions);
    get("size", f.size);
    get_optional("rtg_scale", f.rtg_scale);
    get_optional("target_return", f.target_return);
    get("eval_every", f.eval_every);
    get("eval_episodes", f.eval_episodes);
    get("log_every", f.log_every);
    get("seed", f.seed);
    get("eval_seed", f.eval_seed);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("bad config value: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::io, "cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::config, path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace lmrl
