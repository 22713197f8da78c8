#include "lmrl/traj.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "lmrl/error.hpp"

namespace lmrl {

namespace {

Tensor uniform_fan_in(int in, int out, std::mt19937_64& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(in));
  return Tensor::uniform({in, out}, -bound, bound, rng, true);
}

Tensor constant(Shape shape, std::vector<float> data) { return Tensor(std::move(shape), std::move(data)); }

}  // namespace

DecisionConfig DecisionConfig::for_environment(const Environment& env, const TransformerConfig& backbone) {
  DecisionConfig c;
  c.backbone = backbone;
  c.state_dim = env.state_dim();
  c.action_dim = env.action_dim();
  c.discrete = env.action_kind() == ActionKind::discrete;
  c.max_timestep = env.horizon();
  return c;
}

void DecisionConfig::validate() const {
  backbone.validate();
  if (state_dim < 1 || action_dim < 1) fail(ErrorKind::config, "state and action widths must be positive");
  if (max_timestep < 1) fail(ErrorKind::config, "max_timestep must be positive");
  if (context < 1) fail(ErrorKind::config, "context K must be at least 1");
  if (!(rtg_scale > 0.0f)) fail(ErrorKind::config, "rtg_scale must be positive");
  if (3 * context > backbone.max_positions) {
    fail(ErrorKind::context_length, "context " + std::to_string(context) + " needs " + std::to_string(3 * context) +
                                        " positions but the backbone has " + std::to_string(backbone.max_positions));
  }
}

// Batches --------------------------------------------------------------------

std::vector<float> TrajectoryBatch::token_mask() const {
  std::vector<float> out;
  out.reserve(step_mask.size() * 3);
  for (float m : step_mask) out.insert(out.end(), {m, m, m});
  return out;
}

int TrajectoryBatch::valid_steps() const {
  return static_cast<int>(std::count_if(step_mask.begin(), step_mask.end(), [](float m) { return m != 0.0f; }));
}

TrajectoryBatch empty_batch(const DecisionConfig& config) {
  TrajectoryBatch b;
  b.context = config.context;
  b.state_dim = config.state_dim;
  b.action_dim = config.action_dim;
  b.discrete = config.discrete;
  return b;
}

void append_window(TrajectoryBatch& batch, const Trajectory& traj, int end, float rtg_scale) {
  if (traj.length() == 0) fail(ErrorKind::contract, "cannot batch an empty trajectory");
  if (end < 1 || end > traj.length()) fail(ErrorKind::contract, "window end outside the trajectory");
  if (traj.state_dim != batch.state_dim) fail(ErrorKind::dimension, "trajectory state width does not match the model");
  const int expected_width = batch.discrete ? 1 : batch.action_dim;
  if (traj.action_width != expected_width) fail(ErrorKind::modality, "trajectory actions do not match the action head");
  if (traj.returns_to_go.size() != traj.rewards.size()) fail(ErrorKind::contract, "trajectory lacks returns-to-go");

  const int K = batch.context;
  const int len = std::min(K, end);
  const int start = end - len;
  const auto sd = static_cast<std::size_t>(batch.state_dim);
  const auto ad = static_cast<std::size_t>(batch.action_dim);
  for (int pad = 0; pad < K - len; ++pad) {
    batch.returns.push_back(0.0f);
    batch.states.insert(batch.states.end(), sd, 0.0f);
    batch.actions.insert(batch.actions.end(), ad, 0.0f);
    batch.timesteps.push_back(0);
    batch.step_mask.push_back(0.0f);
    batch.action_ids.push_back(-1);
  }
  for (int t = start; t < end; ++t) {
    const auto ut = static_cast<std::size_t>(t);
    batch.returns.push_back(traj.returns_to_go[ut] / rtg_scale);
    batch.states.insert(batch.states.end(), traj.states.begin() + static_cast<std::ptrdiff_t>(ut * sd),
                        traj.states.begin() + static_cast<std::ptrdiff_t>((ut + 1) * sd));
    if (batch.discrete) {
      const int a = static_cast<int>(traj.actions[ut]);
      if (a < 0 || a >= batch.action_dim) fail(ErrorKind::contract, "discrete action id out of range");
      for (int k = 0; k < batch.action_dim; ++k) batch.actions.push_back(k == a ? 1.0f : 0.0f);
      batch.action_ids.push_back(a);
    } else {
      batch.actions.insert(batch.actions.end(), traj.actions.begin() + static_cast<std::ptrdiff_t>(ut * ad),
                           traj.actions.begin() + static_cast<std::ptrdiff_t>((ut + 1) * ad));
      batch.action_ids.push_back(-1);
    }
    batch.timesteps.push_back(t);
    batch.step_mask.push_back(1.0f);
  }
  ++batch.batch;
}

TrajectoryBatch build_batch(std::span<const Trajectory* const> trajectories, const DecisionConfig& config,
                            std::mt19937_64& rng) {
  if (config.context < 1) fail(ErrorKind::config, "context K must be at least 1");
  if (!(config.rtg_scale > 0.0f)) fail(ErrorKind::config, "rtg_scale must be positive");
  auto batch = empty_batch(config);
  for (const Trajectory* traj : trajectories) {
    if (traj->length() == 0) fail(ErrorKind::contract, "cannot batch an empty trajectory");
    std::uniform_int_distribution<int> end(1, traj->length());
    append_window(batch, *traj, end(rng), config.rtg_scale);
  }
  return batch;
}

TrajectoryBatch sample_batch(std::span<const Trajectory> dataset, int count, const DecisionConfig& config,
                             std::mt19937_64& rng) {
  if (dataset.empty()) fail(ErrorKind::contract, "cannot sample from an empty dataset");
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  std::vector<const Trajectory*> chosen(static_cast<std::size_t>(count));
  for (auto& c : chosen) c = &dataset[pick(rng)];
  return build_batch(chosen, config, rng);
}

// Projections ----------------------------------------------------------------

ModalityProjections::ModalityProjections(const DecisionConfig& config, std::mt19937_64& rng) {
  const int n = config.backbone.model_dim;
  return_weight = uniform_fan_in(1, n, rng);
  return_bias = Tensor::zeros({n}, true);
  state_weight = uniform_fan_in(config.state_dim, n, rng);
  state_bias = Tensor::zeros({n}, true);
  action_weight = uniform_fan_in(config.action_dim, n, rng);
  action_bias = Tensor::zeros({n}, true);
  head_weight = Tensor::normal({n, config.action_dim}, 0.02f, rng, true);
  head_bias = Tensor::zeros({config.action_dim}, true);
  timestep_embedding = Tensor::normal({config.max_timestep, n}, 0.02f, rng, true);
}

std::vector<NamedTensor> ModalityProjections::parameters() const {
  return {{"traj.return.weight", return_weight}, {"traj.return.bias", return_bias},
          {"traj.state.weight", state_weight},   {"traj.state.bias", state_bias},
          {"traj.action.weight", action_weight}, {"traj.action.bias", action_bias},
          {"traj.head.weight", head_weight},     {"traj.head.bias", head_bias},
          {"traj.timestep", timestep_embedding}};
}

StateNormalization StateNormalization::identity(int state_dim) {
  return {std::vector<float>(static_cast<std::size_t>(state_dim), 0.0f),
          std::vector<float>(static_cast<std::size_t>(state_dim), 1.0f)};
}

StateNormalization StateNormalization::from_dataset(std::span<const Trajectory> dataset, int state_dim) {
  const auto sd = static_cast<std::size_t>(state_dim);
  std::vector<double> sum(sd, 0.0), sq(sd, 0.0);
  std::size_t rows = 0;
  for (const auto& traj : dataset) {
    for (std::size_t i = 0; i < traj.states.size(); ++i) {
      sum[i % sd] += traj.states[i];
      sq[i % sd] += static_cast<double>(traj.states[i]) * traj.states[i];
    }
    rows += traj.states.size() / sd;
  }
  auto norm = identity(state_dim);
  if (rows == 0) return norm;
  for (std::size_t d = 0; d < sd; ++d) {
    const double mu = sum[d] / static_cast<double>(rows);
    const double var = std::max(0.0, sq[d] / static_cast<double>(rows) - mu * mu);
    norm.mean[d] = static_cast<float>(mu);
    norm.stddev[d] = var > 1e-12 ? static_cast<float>(std::sqrt(var)) : 1.0f;
  }
  return norm;
}

// Model ----------------------------------------------------------------------

DecisionModel::DecisionModel(const DecisionConfig& config, std::uint64_t seed)
    : DecisionModel(config, Transformer(config.backbone, seed), seed) {}

DecisionModel::DecisionModel(const DecisionConfig& config, Transformer backbone, std::uint64_t seed)
    : config_(config),
      backbone_(std::move(backbone)),
      proj_([&] {
        std::mt19937_64 rng(seed ^ 0xd1b54a32d192ed03ULL);
        return ModalityProjections(config, rng);
      }()),
      norm_(StateNormalization::identity(config.state_dim)) {
  config_.backbone = backbone_.config();
  config_.validate();
}

void DecisionModel::set_state_normalization(StateNormalization norm) {
  if (static_cast<int>(norm.mean.size()) != config_.state_dim || norm.stddev.size() != norm.mean.size()) {
    fail(ErrorKind::dimension, "state normalization width does not match the model");
  }
  norm_ = std::move(norm);
}

Tensor DecisionModel::embed(const TrajectoryBatch& batch) const {
  if (batch.batch < 1) fail(ErrorKind::contract, "empty trajectory batch");
  if (batch.state_dim != config_.state_dim) fail(ErrorKind::dimension, "batch state width does not match the model");
  if (batch.action_dim != config_.action_dim || batch.discrete != config_.discrete) {
    fail(ErrorKind::modality, "batch actions do not match the model's action head");
  }
  if (batch.context > config_.context) {
    fail(ErrorKind::context_length, "batch context exceeds the model context");
  }
  const int rows = batch.batch * batch.context;
  const auto sd = static_cast<std::size_t>(config_.state_dim);
  std::vector<float> states(batch.states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    const std::size_t d = i % sd;
    states[i] = batch.step_mask[i / sd] != 0.0f ? (batch.states[i] - norm_.mean[d]) / norm_.stddev[d] : 0.0f;
  }
  for (int t : batch.timesteps) {
    if (t < 0 || t >= config_.max_timestep) {
      fail(ErrorKind::context_length, "timestep " + std::to_string(t) + " exceeds the timestep table");
    }
  }
  const Tensor time = embedding(proj_.timestep_embedding, batch.timesteps);
  const Tensor r = add(linear(constant({rows, 1}, batch.returns), proj_.return_weight, proj_.return_bias), time);
  const Tensor s = add(linear(constant({rows, config_.state_dim}, std::move(states)), proj_.state_weight,
                              proj_.state_bias),
                       time);
  const Tensor a = add(linear(constant({rows, config_.action_dim}, batch.actions), proj_.action_weight,
                              proj_.action_bias),
                       time);
  const Tensor parts[] = {r, s, a};
  return interleave_rows(parts);
}

std::vector<int> interleaved_positions(const TrajectoryBatch& batch) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(batch.batch) * 3 * static_cast<std::size_t>(batch.context));
  for (int b = 0; b < batch.batch; ++b) {
    int next = 0;
    for (int t = 0; t < batch.context; ++t) {
      const bool valid = batch.step_mask[static_cast<std::size_t>(b * batch.context + t)] != 0.0f;
      for (int j = 0; j < 3; ++j) out.push_back(valid ? next++ : 0);
    }
  }
  return out;
}

Tensor DecisionModel::encode(const Tensor& inputs, const TrajectoryBatch& batch, AttentionRecord* record) {
  const int seq = batch.tokens_per_sample();
  if (seq > backbone_.config().max_positions) {
    fail(ErrorKind::context_length, std::to_string(seq) + " tokens exceed the positional table");
  }
  const auto positions = interleaved_positions(batch);
  const auto mask = batch.token_mask();
  return backbone_.forward(inputs, {batch.batch, seq, positions, mask, true}, record);
}

Tensor DecisionModel::head(const Tensor& hidden_rows) const {
  const Tensor out = linear(hidden_rows, proj_.head_weight, proj_.head_bias);
  return config_.discrete ? out : activate(out, Activation::tanh);
}

DecisionModel::Output DecisionModel::run(const TrajectoryBatch& batch, AttentionRecord* record) {
  Output out;
  out.inputs = embed(batch);
  out.hidden = encode(out.inputs, batch, record);
  std::vector<int> rows;
  rows.reserve(static_cast<std::size_t>(batch.batch * batch.context));
  for (int i = 0; i < batch.batch * batch.context; ++i) rows.push_back(3 * i + 1);
  out.actions = head(gather_rows(out.hidden, rows));
  return out;
}

Tensor DecisionModel::predict_actions(const TrajectoryBatch& batch, AttentionRecord* record) {
  return run(batch, record).actions;
}

std::vector<NamedTensor> DecisionModel::projection_parameters() const { return proj_.parameters(); }

std::vector<NamedTensor> DecisionModel::parameters() const {
  auto out = backbone_.parameters();
  for (auto& p : proj_.parameters()) out.push_back(std::move(p));
  return out;
}

// Loss -----------------------------------------------------------------------

Tensor action_loss(DecisionModel& model, const TrajectoryBatch& batch) {
  return action_loss(model, batch, model.run(batch));
}

Tensor action_loss(DecisionModel& model, const TrajectoryBatch& batch, const DecisionModel::Output& out) {
  const auto& cfg = model.config();
  if (batch.discrete != cfg.discrete || batch.action_dim != cfg.action_dim) {
    fail(ErrorKind::modality, "action head does not match the batch's action space");
  }
  if (batch.valid_steps() == 0) {
    std::cerr << "warning: action_loss on a fully masked batch is defined as 0\n";
    return Tensor::scalar(0.0f);
  }
  const int steps = batch.batch * batch.context;
  Tensor pred = out.actions;
  std::vector<int> target_rows(static_cast<std::size_t>(steps));
  std::iota(target_rows.begin(), target_rows.end(), 0);
  std::vector<float> mask = batch.step_mask;

  if (cfg.loss_positions == LossPositions::all_tokens) {
    // R̂_t predicts a_t; a_t predicts a_{t+1} within the same window.
    std::vector<int> r_rows, a_rows;
    for (int i = 0; i < steps; ++i) {
      r_rows.push_back(3 * i);
      target_rows.push_back(i);
      mask.push_back(batch.step_mask[static_cast<std::size_t>(i)]);
    }
    for (int i = 0; i < steps; ++i) {
      const bool has_next = (i % batch.context) + 1 < batch.context;
      a_rows.push_back(3 * i + 2);
      target_rows.push_back(has_next ? i + 1 : i);
      mask.push_back(has_next ? batch.step_mask[static_cast<std::size_t>(i + 1)] : 0.0f);
    }
    const Tensor parts[] = {pred, model.head(gather_rows(out.hidden, r_rows)),
                            model.head(gather_rows(out.hidden, a_rows))};
    // Stack the three prediction sets row-wise.
    std::vector<int> order;
    const Tensor stacked = interleave_rows(parts);
    for (int part = 0; part < 3; ++part) {
      for (int i = 0; i < steps; ++i) order.push_back(3 * i + part);
    }
    pred = gather_rows(stacked, order);
  }

  if (cfg.discrete) {
    std::vector<int> targets;
    targets.reserve(target_rows.size());
    for (std::size_t k = 0; k < target_rows.size(); ++k) {
      targets.push_back(mask[k] != 0.0f ? batch.action_ids[static_cast<std::size_t>(target_rows[k])] : -1);
    }
    return cross_entropy(pred, targets);
  }
  const auto ad = static_cast<std::size_t>(cfg.action_dim);
  std::vector<float> targets;
  targets.reserve(target_rows.size() * ad);
  for (int row : target_rows) {
    const auto begin = batch.actions.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(row) * ad);
    targets.insert(targets.end(), begin, begin + static_cast<std::ptrdiff_t>(ad));
  }
  const int rows = static_cast<int>(target_rows.size());
  return masked_mse_loss(pred, constant({rows, cfg.action_dim}, std::move(targets)), mask);
}

// Checkpoints ----------------------------------------------------------------

Checkpoint make_decision_checkpoint(const DecisionModel& model, long step) {
  const auto& cfg = model.config();
  Checkpoint ckpt;
  ckpt.kind = "decision";
  ckpt.config = model.backbone().config();
  ckpt.step = step;
  ckpt.tensors = snapshot_tensors(model.parameters());
  const auto& norm = model.state_normalization();
  ckpt.tensors.push_back({"traj.state_mean", Tensor({cfg.state_dim}, norm.mean)});
  ckpt.tensors.push_back({"traj.state_std", Tensor({cfg.state_dim}, norm.stddev)});
  ckpt.meta = {{"state_dim", cfg.state_dim},
               {"action_dim", cfg.action_dim},
               {"discrete", cfg.discrete},
               {"max_timestep", cfg.max_timestep},
               {"context", cfg.context},
               {"rtg_scale", cfg.rtg_scale},
               {"loss_positions", cfg.loss_positions == LossPositions::all_tokens ? "all" : "state"}};
  return ckpt;
}

DecisionModel load_decision_model(const Checkpoint& checkpoint) {
  if (checkpoint.kind != "decision") {
    fail(ErrorKind::format, "expected a decision checkpoint, got '" + checkpoint.kind + "'");
  }
  DecisionConfig cfg;
  cfg.backbone = checkpoint.config;
  try {
    const auto& m = checkpoint.meta;
    cfg.state_dim = m.at("state_dim").get<int>();
    cfg.action_dim = m.at("action_dim").get<int>();
    cfg.discrete = m.at("discrete").get<bool>();
    cfg.max_timestep = m.at("max_timestep").get<int>();
    cfg.context = m.at("context").get<int>();
    cfg.rtg_scale = m.at("rtg_scale").get<float>();
    cfg.loss_positions = m.at("loss_positions").get<std::string>() == "all" ? LossPositions::all_tokens
                                                                            : LossPositions::state_tokens;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("decision checkpoint meta is incomplete: ") + e.what());
  }
  DecisionModel model(cfg, 0);
  auto params = model.parameters();
  copy_tensors_from(checkpoint, params);
  const auto& mean = checkpoint.tensor("traj.state_mean").data();
  const auto& stddev = checkpoint.tensor("traj.state_std").data();
  model.set_state_normalization({std::vector<float>(mean.begin(), mean.end()),
                                 std::vector<float>(stddev.begin(), stddev.end())});
  return model;
}

}  // namespace lmrl
