#include "lmrl/envlab.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "lmrl/error.hpp"
#include "lmrl/format.hpp"

namespace lmrl {

namespace {

// Parses numbers straight into float so shortest-decimal text reads back exactly.
using FloatJson = nlohmann::basic_json<std::map, std::vector, std::string, bool, std::int64_t, std::uint64_t, float>;

std::mt19937_64 episode_rng(std::uint64_t seed, int episode) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(episode)};
  return std::mt19937_64(seq);
}

void require_width(std::span<const float> v, int width, const char* what) {
  if (static_cast<int>(v.size()) != width) {
    fail(ErrorKind::dimension, std::string(what) + " has width " + std::to_string(v.size()) + ", expected " +
                                   std::to_string(width));
  }
}

int discrete_index(std::span<const float> action, int count) {
  require_width(action, 1, "discrete action");
  const float a = action[0];
  if (!(a >= 0.0f) || a >= static_cast<float>(count) || a != std::floor(a)) {
    fail(ErrorKind::contract, "discrete action " + format_float(a) + " is outside 0.." + std::to_string(count - 1));
  }
  return static_cast<int>(a);
}

void write_array(std::ostream& os, std::span<const float> values) {
  os << '[';
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) os << ',';
    os << format_float(values[i]);
  }
  os << ']';
}

}  // namespace

// GridWorld ------------------------------------------------------------------

std::vector<float> GridWorld::reset(std::mt19937_64& rng) const {
  std::uniform_int_distribution<int> cell(0, kSize * kSize - 2);
  const int c = cell(rng);  // the goal cell (last index) is never a start
  return {static_cast<float>(c % kSize), static_cast<float>(c / kSize)};
}

StepResult GridWorld::step(std::span<const float> state, std::span<const float> action, int t) const {
  require_width(state, 2, "gridworld state");
  const int a = discrete_index(action, 4);
  int x = static_cast<int>(state[0]);
  int y = static_cast<int>(state[1]);
  switch (a) {
    case 0: y -= 1; break;
    case 1: y += 1; break;
    case 2: x -= 1; break;
    default: x += 1; break;
  }
  x = std::clamp(x, 0, kSize - 1);
  y = std::clamp(y, 0, kSize - 1);
  const bool goal = x == kSize - 1 && y == kSize - 1;
  return {{static_cast<float>(x), static_cast<float>(y)}, goal ? 1.0f : 0.0f, goal || t + 1 >= kHorizon};
}

std::vector<float> GridWorld::expert_action(std::span<const float> state) const {
  require_width(state, 2, "gridworld state");
  if (state[0] < static_cast<float>(kSize - 1)) return {3.0f};
  return {1.0f};
}

std::vector<float> GridWorld::random_action(std::mt19937_64& rng) const {
  std::uniform_int_distribution<int> pick(0, 3);
  return {static_cast<float>(pick(rng))};
}

std::vector<float> GridWorld::noisy_action(std::span<const float> state, float noise, std::mt19937_64& rng) const {
  std::uniform_real_distribution<float> coin(0.0f, 1.0f);
  if (coin(rng) < noise) return random_action(rng);
  return expert_action(state);
}

// PointMass ------------------------------------------------------------------

std::vector<float> PointMass::reset(std::mt19937_64& rng) const {
  std::uniform_real_distribution<float> pos(-1.0f, 1.0f);
  const float x = pos(rng);
  const float y = pos(rng);
  return {x, y, 0.0f, 0.0f};
}

StepResult PointMass::step(std::span<const float> state, std::span<const float> action, int t) const {
  require_width(state, 4, "pointmass state");
  require_width(action, 2, "pointmass action");
  const float ax = std::clamp(action[0], -1.0f, 1.0f);
  const float ay = std::clamp(action[1], -1.0f, 1.0f);
  const float vx = state[2] + kDt * ax;
  const float vy = state[3] + kDt * ay;
  const float x = state[0] + kDt * vx;
  const float y = state[1] + kDt * vy;
  const float dist = std::sqrt(x * x + y * y);
  return {{x, y, vx, vy}, -dist, dist < kGoalRadius || t + 1 >= kHorizon};
}

std::vector<float> PointMass::expert_action(std::span<const float> state) const {
  require_width(state, 4, "pointmass state");
  constexpr float kp = 4.0f;
  constexpr float kd = 4.0f;
  return {std::clamp(-kp * state[0] - kd * state[2], -1.0f, 1.0f),
          std::clamp(-kp * state[1] - kd * state[3], -1.0f, 1.0f)};
}

std::vector<float> PointMass::random_action(std::mt19937_64& rng) const {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  const float ax = u(rng);
  const float ay = u(rng);
  return {ax, ay};
}

std::vector<float> PointMass::noisy_action(std::span<const float> state, float noise, std::mt19937_64& rng) const {
  auto a = expert_action(state);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (float& v : a) v = std::clamp(v + noise * n(rng), -1.0f, 1.0f);
  return a;
}

std::unique_ptr<Environment> make_environment(std::string_view name) {
  if (name == "gridworld") return std::make_unique<GridWorld>();
  if (name == "pointmass") return std::make_unique<PointMass>();
  fail(ErrorKind::config, "unknown environment '" + std::string(name) + "'");
}

// Episodes -------------------------------------------------------------------

float Trajectory::episode_return() const {
  double s = 0.0;
  for (float r : rewards) s += r;
  return static_cast<float>(s);
}

std::vector<float> compute_returns_to_go(std::span<const float> rewards) {
  std::vector<float> out(rewards.size());
  float acc = 0.0f;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc = rewards[i] + acc;
    out[i] = acc;
  }
  return out;
}

std::string_view to_string(BehaviorPolicy policy) {
  switch (policy) {
    case BehaviorPolicy::random: return "random";
    case BehaviorPolicy::expert: return "expert";
    case BehaviorPolicy::medium: return "medium";
    case BehaviorPolicy::replay: return "replay";
  }
  return "?";
}

Trajectory run_episode(const Environment& env, BehaviorPolicy policy, float noise, std::mt19937_64& rng) {
  Trajectory traj;
  traj.state_dim = env.state_dim();
  traj.action_width = env.action_width();
  auto state = env.reset(rng);
  for (int t = 0; t < env.horizon(); ++t) {
    std::vector<float> action;
    switch (policy) {
      case BehaviorPolicy::random: action = env.random_action(rng); break;
      case BehaviorPolicy::expert: action = env.expert_action(state); break;
      default: action = env.noisy_action(state, noise, rng); break;
    }
    if (env.action_kind() == ActionKind::continuous) {
      for (float& a : action) a = std::clamp(a, -1.0f, 1.0f);
    }
    auto result = env.step(state, action, t);
    traj.states.insert(traj.states.end(), state.begin(), state.end());
    traj.actions.insert(traj.actions.end(), action.begin(), action.end());
    traj.rewards.push_back(result.reward);
    state = std::move(result.next_state);
    if (result.done) break;
  }
  traj.returns_to_go = compute_returns_to_go(traj.rewards);
  return traj;
}

ReferenceScores reference_scores(const Environment& env, std::uint64_t seed, int episodes) {
  if (episodes < 1) fail(ErrorKind::config, "reference scores need at least one episode");
  double random_sum = 0.0;
  double expert_sum = 0.0;
  for (int i = 0; i < episodes; ++i) {
    auto rng = episode_rng(seed, i);
    random_sum += run_episode(env, BehaviorPolicy::random, 0.0f, rng).episode_return();
    rng = episode_rng(seed, i);
    expert_sum += run_episode(env, BehaviorPolicy::expert, 0.0f, rng).episode_return();
  }
  return {random_sum / episodes, expert_sum / episodes};
}

double behavior_return(const Environment& env, float noise, std::uint64_t seed, int episodes) {
  double sum = 0.0;
  for (int i = 0; i < episodes; ++i) {
    auto rng = episode_rng(seed, i);
    sum += run_episode(env, BehaviorPolicy::medium, noise, rng).episode_return();
  }
  return sum / episodes;
}

float calibrate_medium_noise(const Environment& env, std::uint64_t seed, int episodes, int iterations) {
  const auto ref = reference_scores(env, seed, episodes);
  const double target = 0.5 * (ref.random_score + ref.expert_score);
  float lo = 0.0f;
  float hi = env.max_noise();
  for (int i = 0; i < iterations; ++i) {
    const float mid = 0.5f * (lo + hi);
    if (behavior_return(env, mid, seed, episodes) > target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5f * (lo + hi);
}

// Datasets -------------------------------------------------------------------

bool valid_tier(std::string_view tier) {
  return tier == "medium" || tier == "medium-expert" || tier == "medium-replay";
}

Dataset generate_dataset(const Environment& env, std::string_view tier, int episodes, std::uint64_t seed) {
  if (!valid_tier(tier)) fail(ErrorKind::config, "unknown dataset tier '" + std::string(tier) + "'");
  if (episodes < 1) fail(ErrorKind::config, "a dataset needs at least one episode");
  Dataset ds;
  auto& m = ds.manifest;
  m.environment = env.name();
  m.tier = std::string(tier);
  m.episodes = episodes;
  m.seed = seed;
  const auto ref = reference_scores(env, seed ^ 0x5eedf00dULL);
  m.random_score = ref.random_score;
  m.expert_score = ref.expert_score;

  const float medium = env.medium_noise();
  const int medium_count = (episodes + 1) / 2;
  double total = 0.0;
  for (int i = 0; i < episodes; ++i) {
    BehaviorPolicy policy = BehaviorPolicy::medium;
    float noise = medium;
    if (tier == "medium-expert" && i >= medium_count) {
      policy = BehaviorPolicy::expert;
      noise = 0.0f;
    } else if (tier == "medium-replay") {
      policy = BehaviorPolicy::replay;
      const float frac = episodes > 1 ? static_cast<float>(i) / static_cast<float>(episodes - 1) : 1.0f;
      noise = env.replay_start_noise() + frac * (medium - env.replay_start_noise());
    }
    auto rng = episode_rng(seed, i);
    ds.episodes.push_back(run_episode(env, policy, noise, rng));
    m.behavior.emplace_back(to_string(policy));
    m.noise.push_back(noise);
    total += ds.episodes.back().episode_return();
  }
  m.mean_return = total / episodes;
  return ds;
}

std::filesystem::path episodes_path(const std::filesystem::path& stem) {
  auto p = stem;
  p += ".jsonl";
  return p;
}

std::filesystem::path manifest_path(const std::filesystem::path& stem) {
  auto p = stem;
  p += ".manifest.json";
  return p;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& stem) {
  if (stem.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(stem.parent_path(), ec);
  }
  const auto ep = episodes_path(stem);
  std::ofstream os(ep, std::ios::trunc | std::ios::binary);
  if (!os) fail(ErrorKind::io, "cannot write dataset " + ep.string());
  for (const auto& traj : dataset.episodes) {
    const auto steps = static_cast<std::size_t>(traj.length());
    const auto sd = static_cast<std::size_t>(traj.state_dim);
    const auto aw = static_cast<std::size_t>(traj.action_width);
    const bool discrete = dataset.manifest.environment == "gridworld";
    os << "{\"states\":[";
    for (std::size_t t = 0; t < steps; ++t) {
      if (t) os << ',';
      write_array(os, std::span(traj.states).subspan(t * sd, sd));
    }
    os << "],\"actions\":[";
    for (std::size_t t = 0; t < steps; ++t) {
      if (t) os << ',';
      if (discrete) {
        os << static_cast<int>(traj.actions[t]);
      } else {
        write_array(os, std::span(traj.actions).subspan(t * aw, aw));
      }
    }
    os << "],\"rewards\":";
    write_array(os, traj.rewards);
    os << "}\n";
  }
  if (!os) fail(ErrorKind::io, "failed writing dataset " + ep.string());

  const auto& m = dataset.manifest;
  nlohmann::ordered_json j;
  j["environment"] = m.environment;
  j["tier"] = m.tier;
  j["episodes"] = m.episodes;
  j["seed"] = m.seed;
  j["random_score"] = m.random_score;
  j["expert_score"] = m.expert_score;
  j["mean_return"] = m.mean_return;
  j["behavior"] = m.behavior;
  // Shortest float text widened to double prints back as the same text.
  auto noise = nlohmann::ordered_json::array();
  for (float v : m.noise) noise.push_back(std::stod(format_float(v)));
  j["noise"] = noise;
  const auto mp = manifest_path(stem);
  std::ofstream ms(mp, std::ios::trunc | std::ios::binary);
  if (!ms) fail(ErrorKind::io, "cannot write manifest " + mp.string());
  ms << j.dump(2) << '\n';
  if (!ms) fail(ErrorKind::io, "failed writing manifest " + mp.string());
}

Dataset load_dataset(const std::filesystem::path& stem) {
  Dataset ds;
  const auto mp = manifest_path(stem);
  std::ifstream ms(mp, std::ios::binary);
  if (!ms) fail(ErrorKind::io, "cannot read manifest " + mp.string());
  FloatJson mj;
  nlohmann::json dj;
  {
    std::stringstream buf;
    buf << ms.rdbuf();
    try {
      mj = FloatJson::parse(buf.str());
      dj = nlohmann::json::parse(buf.str());
    } catch (const std::exception& e) {
      fail(ErrorKind::format, "malformed manifest " + mp.string() + ": " + e.what());
    }
  }
  auto& m = ds.manifest;
  try {
    m.environment = dj.at("environment").get<std::string>();
    m.tier = dj.at("tier").get<std::string>();
    m.episodes = dj.at("episodes").get<int>();
    m.seed = dj.at("seed").get<std::uint64_t>();
    m.random_score = dj.at("random_score").get<double>();
    m.expert_score = dj.at("expert_score").get<double>();
    m.mean_return = dj.at("mean_return").get<double>();
    m.behavior = dj.at("behavior").get<std::vector<std::string>>();
    m.noise = mj.at("noise").get<std::vector<float>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "manifest " + mp.string() + " is missing fields: " + e.what());
  }
  const auto env = make_environment(m.environment);
  const bool discrete = env->action_kind() == ActionKind::discrete;

  const auto ep = episodes_path(stem);
  std::ifstream is(ep, std::ios::binary);
  if (!is) fail(ErrorKind::io, "cannot read dataset " + ep.string());
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    Trajectory traj;
    traj.state_dim = env->state_dim();
    traj.action_width = env->action_width();
    try {
      const auto j = FloatJson::parse(line);
      for (const auto& s : j.at("states")) {
        if (static_cast<int>(s.size()) != traj.state_dim) fail(ErrorKind::dimension, "state width mismatch in " + ep.string());
        for (const auto& v : s) traj.states.push_back(v.get<float>());
      }
      for (const auto& a : j.at("actions")) {
        if (discrete) {
          traj.actions.push_back(static_cast<float>(a.get<int>()));
        } else {
          if (static_cast<int>(a.size()) != traj.action_width) fail(ErrorKind::dimension, "action width mismatch in " + ep.string());
          for (const auto& v : a) traj.actions.push_back(v.get<float>());
        }
      }
      traj.rewards = j.at("rewards").get<std::vector<float>>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::format, "malformed episode in " + ep.string() + ": " + e.what());
    }
    const auto steps = traj.rewards.size();
    if (steps == 0 || traj.states.size() != steps * static_cast<std::size_t>(traj.state_dim) ||
        traj.actions.size() != steps * static_cast<std::size_t>(traj.action_width)) {
      fail(ErrorKind::format, "episode fields disagree on length in " + ep.string());
    }
    traj.returns_to_go = compute_returns_to_go(traj.rewards);
    ds.episodes.push_back(std::move(traj));
  }
  if (static_cast<int>(ds.episodes.size()) != m.episodes) {
    fail(ErrorKind::format, "manifest lists " + std::to_string(m.episodes) + " episodes, file holds " +
                                std::to_string(ds.episodes.size()));
  }
  return ds;
}

}  // namespace lmrl
