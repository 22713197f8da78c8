#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "lmrl/error.hpp"
#include "lmrl/traj.hpp"

using namespace lmrl;

namespace {

TransformerConfig tiny_backbone() {
  auto c = TransformerConfig::preset("micro");
  c.dropout = 0.0f;
  return c;
}

DecisionConfig pointmass_config(int context) {
  PointMass env;
  auto c = DecisionConfig::for_environment(env, tiny_backbone());
  c.context = context;
  return c;
}

Trajectory make_trajectory(int length, std::uint64_t seed, int state_dim = 4, int action_width = 2) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  Trajectory t;
  t.state_dim = state_dim;
  t.action_width = action_width;
  for (int i = 0; i < length; ++i) {
    for (int d = 0; d < state_dim; ++d) t.states.push_back(n(rng));
    for (int d = 0; d < action_width; ++d) t.actions.push_back(std::tanh(n(rng)));
    t.rewards.push_back(n(rng));
  }
  t.returns_to_go = compute_returns_to_go(t.rewards);
  return t;
}

TrajectoryBatch window_batch(const Trajectory& traj, int end, const DecisionConfig& cfg) {
  auto b = empty_batch(cfg);
  append_window(b, traj, end, cfg.rtg_scale);
  return b;
}

}  // namespace

TEST_CASE("one timestep becomes three tokens in (R, s, a) order") {
  auto cfg = pointmass_config(1);
  DecisionModel model(cfg, 1);
  const auto traj = make_trajectory(1, 2);
  const auto batch = window_batch(traj, 1, cfg);
  CHECK(batch.tokens_per_sample() == 3);
  const Tensor I = model.embed(batch);
  REQUIRE(I.dim(0) == 3);
  const int n = cfg.backbone.model_dim;
  const auto& p = model.projections();
  for (int j = 0; j < n; ++j) {
    const float time = p.timestep_embedding.at(static_cast<std::size_t>(j));
    const float r = batch.returns[0] * p.return_weight.at(static_cast<std::size_t>(j)) + time;
    float s = time, a = time;
    for (int d = 0; d < 4; ++d) s += traj.states[static_cast<std::size_t>(d)] * p.state_weight.at(static_cast<std::size_t>(d * n + j));
    for (int d = 0; d < 2; ++d) a += traj.actions[static_cast<std::size_t>(d)] * p.action_weight.at(static_cast<std::size_t>(d * n + j));
    CHECK(I.at(static_cast<std::size_t>(j)) == doctest::Approx(r).epsilon(1e-5));
    CHECK(I.at(static_cast<std::size_t>(n + j)) == doctest::Approx(s).epsilon(1e-5));
    CHECK(I.at(static_cast<std::size_t>(2 * n + j)) == doctest::Approx(a).epsilon(1e-5));
  }
}

TEST_CASE("short windows are left padded and masked") {
  auto cfg = pointmass_config(6);
  const auto traj = make_trajectory(10, 3);
  const auto batch = window_batch(traj, 4, cfg);
  const auto mask = batch.token_mask();
  REQUIRE(mask.size() == 18);
  for (int i = 0; i < 6; ++i) CHECK(mask[static_cast<std::size_t>(i)] == 0.0f);
  for (int i = 6; i < 18; ++i) CHECK(mask[static_cast<std::size_t>(i)] == 1.0f);
  CHECK(batch.timesteps == std::vector<int>{0, 0, 0, 1, 2, 3});
  CHECK(interleaved_positions(batch) == std::vector<int>{0, 0, 0, 0, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});

  std::mt19937_64 rng(1);
  const Trajectory empty{4, 2, {}, {}, {}, {}};
  const Trajectory* ptr = &empty;
  CHECK_THROWS_AS(build_batch(std::span(&ptr, 1), cfg, rng), Error);
  auto bad = cfg;
  bad.context = 0;
  const Trajectory* ok = &traj;
  CHECK_THROWS_AS(build_batch(std::span(&ok, 1), bad, rng), Error);
}

TEST_CASE("returns are scaled before the return projection") {
  auto cfg = pointmass_config(1);
  cfg.rtg_scale = 1000.0f;
  Trajectory t{4, 2, {0, 0, 0, 0}, {0, 0}, {3600.0f}, {}};
  t.returns_to_go = compute_returns_to_go(t.rewards);
  const auto batch = window_batch(t, 1, cfg);
  CHECK(batch.returns[0] == doctest::Approx(3.6f).epsilon(1e-7));
}

TEST_CASE("padding never changes predictions for real tokens") {
  auto cfg = pointmass_config(8);
  DecisionModel model(cfg, 4);
  const auto traj = make_trajectory(12, 5);
  auto short_cfg = cfg;
  short_cfg.context = 3;
  const Tensor padded = model.predict_actions(window_batch(traj, 3, cfg));
  const Tensor tight = model.predict_actions(window_batch(traj, 3, short_cfg));
  for (int t = 0; t < 3; ++t) {
    for (int d = 0; d < 2; ++d) {
      CHECK(padded.at(static_cast<std::size_t>((5 + t) * 2 + d)) ==
            doctest::Approx(tight.at(static_cast<std::size_t>(t * 2 + d))).epsilon(1e-5));
    }
  }
}

TEST_CASE("action loss is zero on perfect predictions and on empty masks") {
  auto cfg = pointmass_config(1);
  DecisionModel model(cfg, 6);
  auto batch = window_batch(make_trajectory(4, 7), 2, cfg);
  const Tensor pred = model.predict_actions(batch);
  batch.actions.assign(pred.data().begin(), pred.data().end());
  CHECK(action_loss(model, batch).item() == 0.0f);

  auto masked = batch;
  std::fill(masked.step_mask.begin(), masked.step_mask.end(), 0.0f);
  CHECK(action_loss(model, masked).item() == 0.0f);
}

TEST_CASE("modality mismatch is rejected") {
  auto cfg = pointmass_config(2);
  DecisionModel model(cfg, 1);
  GridWorld grid;
  auto grid_cfg = DecisionConfig::for_environment(grid, tiny_backbone());
  grid_cfg.context = 2;
  Trajectory g{2, 1, {0, 0}, {3}, {0}, {0}};
  auto batch = window_batch(g, 1, grid_cfg);
  CHECK_THROWS_AS(action_loss(model, batch), Error);
  auto pm_batch = empty_batch(cfg);
  CHECK_THROWS_AS(append_window(pm_batch, g, 1, 1.0f), Error);
}

TEST_CASE("discrete actions use one-hot inputs and cross entropy") {
  GridWorld grid;
  auto cfg = DecisionConfig::for_environment(grid, tiny_backbone());
  cfg.context = 3;
  DecisionModel model(cfg, 2);
  std::mt19937_64 rng(3);
  auto traj = run_episode(grid, BehaviorPolicy::random, 0.0f, rng);
  const auto batch = window_batch(traj, std::min(3, traj.length()), cfg);
  CHECK(batch.actions.size() == static_cast<std::size_t>(3 * 4));
  const float loss = action_loss(model, batch).item();
  CHECK(loss == doctest::Approx(std::log(4.0f)).epsilon(0.05));
}

TEST_CASE("predicting a_t ignores a_t and everything after it") {
  auto cfg = pointmass_config(5);
  DecisionModel model(cfg, 8);
  const auto traj = make_trajectory(5, 9);
  const auto base = window_batch(traj, 5, cfg);
  const Tensor ref = model.predict_actions(base);
  const int t = 2;
  auto changed = base;
  for (int k = t; k < 5; ++k) {
    changed.actions[static_cast<std::size_t>(k * 2)] += 0.7f;
    if (k > t) {
      changed.returns[static_cast<std::size_t>(k)] += 1.5f;
      changed.states[static_cast<std::size_t>(k * 4 + 1)] -= 2.0f;
    }
  }
  const Tensor out = model.predict_actions(changed);
  for (int k = 0; k <= t; ++k) {
    for (int d = 0; d < 2; ++d) {
      const auto i = static_cast<std::size_t>(k * 2 + d);
      CHECK(out.at(i) == ref.at(i));
    }
  }
  auto cond = base;
  cond.returns[static_cast<std::size_t>(t)] += 1.0f;
  CHECK(model.predict_actions(cond).at(static_cast<std::size_t>(t * 2)) != ref.at(static_cast<std::size_t>(t * 2)));
  auto state = base;
  state.states[static_cast<std::size_t>(t * 4)] += 1.0f;
  CHECK(model.predict_actions(state).at(static_cast<std::size_t>(t * 2)) != ref.at(static_cast<std::size_t>(t * 2)));
}

TEST_CASE("ten trajectories are memorized") {
  auto cfg = pointmass_config(4);
  DecisionModel model(cfg, 10);
  std::vector<Trajectory> data;
  PointMass env;
  for (int i = 0; i < 10; ++i) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(i));
    auto t = run_episode(env, BehaviorPolicy::expert, 0.0f, rng);
    t.states.resize(static_cast<std::size_t>(8 * 4));
    t.actions.resize(static_cast<std::size_t>(8 * 2));
    t.rewards.resize(8);
    t.returns_to_go = compute_returns_to_go(t.rewards);
    data.push_back(std::move(t));
  }
  model.set_state_normalization(StateNormalization::from_dataset(data, 4));
  AdamW opt(model.parameters(), {2e-3f, 0.9f, 0.999f, 1e-8f, 0.0f, 20, 1.0f});
  std::vector<const Trajectory*> all;
  for (const auto& t : data) all.push_back(&t);
  std::mt19937_64 rng(1);
  float first = 0.0f;
  for (int step = 0; step < 1000; ++step) {
    const auto batch = build_batch(all, cfg, rng);
    Tensor loss = action_loss(model, batch);
    if (step == 0) first = loss.item();
    loss.backward();
    opt.step();
  }
  // Every window of every trajectory.
  auto full = empty_batch(cfg);
  for (const auto& t : data) {
    for (int end = 1; end <= t.length(); ++end) append_window(full, t, end, cfg.rtg_scale);
  }
  NoGradGuard guard;
  const float final_loss = action_loss(model, full).item();
  MESSAGE("memorization loss " << first << " -> " << final_loss);
  CHECK(final_loss < 1e-3f);
}

TEST_CASE("all-token loss positions train on three predictions per step") {
  auto cfg = pointmass_config(3);
  cfg.loss_positions = LossPositions::all_tokens;
  DecisionModel model(cfg, 12);
  const auto batch = window_batch(make_trajectory(6, 13), 6, cfg);
  Tensor loss = action_loss(model, batch);
  CHECK(std::isfinite(loss.item()));
  loss.backward();
  CHECK(model.projections().head_weight.has_grad());
}

TEST_CASE("positional ablation replaces only P") {
  auto cfg = pointmass_config(4);
  Transformer lm(cfg.backbone, 21);
  DecisionModel a(cfg, lm.clone(), 3);
  DecisionModel b(cfg, lm.clone(), 3);
  b.backbone().reinitialize_positions(99);
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const bool same = std::equal(pa[i].value.data().begin(), pa[i].value.data().end(), pb[i].value.data().begin());
    CHECK_MESSAGE(same == (pa[i].name != "wpe"), pa[i].name);
  }
}

TEST_CASE("context longer than the positional table is an error") {
  auto cfg = pointmass_config(4);
  cfg.backbone.max_positions = 9;
  CHECK_THROWS_AS(DecisionModel(cfg, 0), Error);
}

TEST_CASE("decision checkpoints round trip") {
  auto cfg = pointmass_config(4);
  DecisionModel model(cfg, 14);
  std::vector<Trajectory> data{make_trajectory(9, 1), make_trajectory(7, 2)};
  model.set_state_normalization(StateNormalization::from_dataset(data, 4));
  const auto path = std::filesystem::temp_directory_path() / "lmrl_test_traj.ckpt";
  save_checkpoint(path, make_decision_checkpoint(model, 3));
  auto restored = load_decision_model(load_checkpoint(path));
  const auto batch = window_batch(data[0], 6, cfg);
  const Tensor x = model.predict_actions(batch);
  const Tensor y = restored.predict_actions(batch);
  CHECK(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
  CHECK(restored.state_normalization().mean == model.state_normalization().mean);
  std::filesystem::remove(path);
}
