#include "lmrl/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

#include "lmrl/error.hpp"
#include "lmrl/format.hpp"

namespace lmrl {

// Rollouts -------------------------------------------------------------------

std::vector<std::vector<float>> evaluation_starts(const Environment& env, std::uint64_t seed, int episodes) {
  std::vector<std::vector<float>> out;
  for (int i = 0; i < episodes; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(i), 0xe7a1u};
    std::mt19937_64 rng(seq);
    out.push_back(env.reset(rng));
  }
  return out;
}

std::vector<RolloutTrace> rollout_batch(DecisionModel& model, const Environment& env, float target_return, int context,
                                        std::span<const std::vector<float>> start_states) {
  const auto& cfg = model.config();
  if (!std::isfinite(target_return)) fail(ErrorKind::contract, "target return must be finite");
  if (context < 1) fail(ErrorKind::config, "rollout context must be at least 1");
  if (cfg.discrete != (env.action_kind() == ActionKind::discrete) || cfg.action_dim != env.action_dim() ||
      cfg.state_dim != env.state_dim()) {
    fail(ErrorKind::modality, "model and environment disagree on state or action spaces");
  }
  const int K = std::min(context, cfg.context);
  const auto sd = static_cast<std::size_t>(cfg.state_dim);
  const auto ad = static_cast<std::size_t>(cfg.action_dim);
  const std::size_t episodes = start_states.size();

  struct History {
    std::vector<float> rtg, states, actions;  // actions one-hot when discrete
    std::vector<float> state;
    bool done = false;
  };
  std::vector<History> hist(episodes);
  std::vector<RolloutTrace> traces(episodes);
  for (std::size_t e = 0; e < episodes; ++e) {
    hist[e].state = start_states[e];
    hist[e].rtg.push_back(target_return);
  }

  NoGradGuard no_grad;
  const bool was_training = model.backbone().training();
  model.set_training(false);
  for (int t = 0; t < env.horizon(); ++t) {
    std::vector<std::size_t> active;
    for (std::size_t e = 0; e < episodes; ++e) {
      if (!hist[e].done) active.push_back(e);
    }
    if (active.empty()) break;
    const int len = std::min(K, t + 1);
    TrajectoryBatch batch;
    batch.context = len;
    batch.state_dim = cfg.state_dim;
    batch.action_dim = cfg.action_dim;
    batch.discrete = cfg.discrete;
    for (std::size_t e : active) {
      auto& h = hist[e];
      h.states.insert(h.states.end(), h.state.begin(), h.state.end());
      h.actions.insert(h.actions.end(), ad, 0.0f);  // placeholder for a_t, never attended by s_t
      for (int k = t + 1 - len; k <= t; ++k) {
        const auto uk = static_cast<std::size_t>(k);
        batch.returns.push_back(h.rtg[uk] / cfg.rtg_scale);
        batch.states.insert(batch.states.end(), h.states.begin() + static_cast<std::ptrdiff_t>(uk * sd),
                            h.states.begin() + static_cast<std::ptrdiff_t>((uk + 1) * sd));
        batch.actions.insert(batch.actions.end(), h.actions.begin() + static_cast<std::ptrdiff_t>(uk * ad),
                             h.actions.begin() + static_cast<std::ptrdiff_t>((uk + 1) * ad));
        batch.timesteps.push_back(k);
        batch.step_mask.push_back(1.0f);
        batch.action_ids.push_back(-1);
      }
      ++batch.batch;
    }
    const Tensor pred = model.predict_actions(batch);
    const auto p = pred.data();
    for (std::size_t i = 0; i < active.size(); ++i) {
      const std::size_t e = active[i];
      auto& h = hist[e];
      const float* row = p.data() + ((i * static_cast<std::size_t>(len)) + static_cast<std::size_t>(len - 1)) * ad;
      std::vector<float> action;
      float* stored = h.actions.data() + static_cast<std::size_t>(t) * ad;
      if (cfg.discrete) {
        const int best = static_cast<int>(std::max_element(row, row + ad) - row);
        action = {static_cast<float>(best)};
        stored[best] = 1.0f;
      } else {
        action.assign(row, row + ad);
        std::copy(row, row + ad, stored);
      }
      auto result = env.step(h.state, action, t);
      auto& tr = traces[e];
      tr.returns_to_go.push_back(h.rtg.back());
      tr.rewards.push_back(result.reward);
      tr.actions.insert(tr.actions.end(), action.begin(), action.end());
      tr.episode_return += result.reward;
      h.rtg.push_back(h.rtg.back() - result.reward);
      h.state = std::move(result.next_state);
      h.done = result.done;
    }
  }
  model.set_training(was_training);
  return traces;
}

RolloutTrace rollout(DecisionModel& model, const Environment& env, float target_return, int context,
                     std::span<const float> start_state) {
  const std::vector<std::vector<float>> starts{std::vector<float>(start_state.begin(), start_state.end())};
  return rollout_batch(model, env, target_return, context, starts).front();
}

// Scores ---------------------------------------------------------------------

double normalized_score(double score, double random_score, double expert_score) {
  if (!(expert_score != random_score) || !std::isfinite(expert_score - random_score)) {
    fail(ErrorKind::degenerate_input, "expert and random reference scores coincide");
  }
  return 100.0 * (score - random_score) / (expert_score - random_score);
}

long convergence_step(std::span<const long> steps, std::span<const double> scores, double tolerance) {
  if (steps.empty() || steps.size() != scores.size()) fail(ErrorKind::contract, "convergence_step needs a nonempty curve");
  const double best = *std::max_element(scores.begin(), scores.end());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] >= best - tolerance) return steps[i];
  }
  return steps.back();
}

long convergence_step(std::span<const EvalPoint> curve, double tolerance) {
  std::vector<long> steps;
  std::vector<double> scores;
  for (const auto& p : curve) {
    steps.push_back(p.step);
    scores.push_back(p.normalized_mean);
  }
  return convergence_step(steps, scores, tolerance);
}

double best_score(std::span<const EvalPoint> curve) {
  if (curve.empty()) fail(ErrorKind::contract, "best_score needs a nonempty curve");
  double best = curve.front().normalized_mean;
  for (const auto& p : curve) best = std::max(best, p.normalized_mean);
  return best;
}

double percentile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) fail(ErrorKind::contract, "percentile of an empty sample");
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

double median(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  return percentile_sorted(values, 0.5);
}

ConfidenceInterval bootstrap_ci(std::span<const double> scores, int resamples, double level, std::uint64_t seed) {
  if (scores.empty()) fail(ErrorKind::contract, "bootstrap_ci needs at least one score");
  if (resamples < 1 || !(level > 0.0 && level < 1.0)) fail(ErrorKind::config, "bad bootstrap settings");
  if (scores.size() == 1) {
    std::cerr << "warning: bootstrap interval from a single score is degenerate\n";
    return {scores[0], scores[0]};
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, scores.size() - 1);
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) s += scores[pick(rng)];
    m = s / static_cast<double>(scores.size());
  }
  std::sort(means.begin(), means.end());
  const double tail = (1.0 - level) / 2.0;
  return {percentile_sorted(means, tail), percentile_sorted(means, 1.0 - tail)};
}

// Attention ------------------------------------------------------------------

AttentionMaps attention_maps(const AttentionRecord& record, std::span<const float> key_valid, int sample,
                             float temperature) {
  if (!(temperature > 0.0f)) fail(ErrorKind::config, "temperature must be positive");
  AttentionMaps maps;
  maps.temperature = temperature;
  for (const auto& cap : record.layers) {
    if (cap.weights.empty()) fail(ErrorKind::contract, "attention capture was not enabled");
    if (sample < 0 || sample >= cap.batch) fail(ErrorKind::contract, "attention sample index out of range");
    const int T = cap.seq;
    maps.seq = T;
    const auto cells = static_cast<std::size_t>(T) * static_cast<std::size_t>(T);
    std::vector<double> w(cells, 0.0), sharp(cells, 0.0);
    const float* valid = key_valid.empty() ? nullptr : key_valid.data() + static_cast<std::size_t>(sample) * T;
    for (int h = 0; h < cap.heads; ++h) {
      const std::size_t base = (static_cast<std::size_t>(sample) * cap.heads + static_cast<std::size_t>(h)) * cells;
      for (int q = 0; q < T; ++q) {
        const std::size_t row = base + static_cast<std::size_t>(q) * T;
        double mx = -INFINITY;
        for (int k = 0; k <= q; ++k) {
          if (valid && valid[k] == 0.0f && k != q) continue;
          mx = std::max(mx, static_cast<double>(cap.scores[row + static_cast<std::size_t>(k)]) / temperature);
        }
        double z = 0.0;
        std::vector<double> e(static_cast<std::size_t>(q) + 1, 0.0);
        for (int k = 0; k <= q; ++k) {
          if (valid && valid[k] == 0.0f && k != q) continue;
          e[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(cap.scores[row + static_cast<std::size_t>(k)]) / temperature - mx);
          z += e[static_cast<std::size_t>(k)];
        }
        for (int k = 0; k < T; ++k) {
          const std::size_t cell = static_cast<std::size_t>(q) * T + static_cast<std::size_t>(k);
          w[cell] += cap.weights[row + static_cast<std::size_t>(k)];
          if (k <= q) sharp[cell] += e[static_cast<std::size_t>(k)] / z;
        }
      }
    }
    std::vector<float> wf(cells), sf(cells);
    for (std::size_t i = 0; i < cells; ++i) {
      wf[i] = static_cast<float>(w[i] / cap.heads);
      sf[i] = static_cast<float>(sharp[i] / cap.heads);
    }
    maps.weights.push_back(std::move(wf));
    maps.sharpened.push_back(std::move(sf));
  }
  return maps;
}

AttentionMaps attention_export(DecisionModel& model, const TrajectoryBatch& batch, float temperature, int sample) {
  NoGradGuard no_grad;
  const bool was_training = model.backbone().training();
  model.set_training(false);
  AttentionRecord record;
  model.predict_actions(batch, &record);
  model.set_training(was_training);
  return attention_maps(record, batch.token_mask(), sample, temperature);
}

namespace {

void write_matrix_csv(const std::filesystem::path& path, const std::vector<float>& m, int T) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::io, "cannot write " + path.string());
  for (int q = 0; q < T; ++q) {
    for (int k = 0; k < T; ++k) {
      if (k) os << ',';
      os << format_float(m[static_cast<std::size_t>(q) * T + static_cast<std::size_t>(k)]);
    }
    os << '\n';
  }
}

void write_pgm(const std::filesystem::path& path, const std::vector<float>& m, int T, int cell) {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) fail(ErrorKind::io, "cannot write " + path.string());
  const int side = T * cell;
  os << "P5\n" << side << ' ' << side << "\n255\n";
  std::vector<unsigned char> line(static_cast<std::size_t>(side));
  for (int y = 0; y < side; ++y) {
    const int q = y / cell;
    for (int x = 0; x < side; ++x) {
      const int k = x / cell;
      const float v = k > q ? 0.0f : std::clamp(m[static_cast<std::size_t>(q) * T + static_cast<std::size_t>(k)], 0.0f, 1.0f);
      line[static_cast<std::size_t>(x)] = static_cast<unsigned char>(std::lround(255.0f * v));
    }
    os.write(reinterpret_cast<const char*>(line.data()), side);
  }
}

}  // namespace

std::vector<std::filesystem::path> write_attention(const AttentionMaps& maps, const std::filesystem::path& dir,
                                                   int cell_pixels) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> out;
  for (std::size_t l = 0; l < maps.weights.size(); ++l) {
    const std::string stem = "layer" + std::to_string(l);
    out.push_back(dir / (stem + ".csv"));
    write_matrix_csv(out.back(), maps.weights[l], maps.seq);
    out.push_back(dir / (stem + "_sharp.csv"));
    write_matrix_csv(out.back(), maps.sharpened[l], maps.seq);
    out.push_back(dir / (stem + ".pgm"));
    write_pgm(out.back(), maps.sharpened[l], maps.seq, cell_pixels);
  }
  return out;
}

// Reports --------------------------------------------------------------------

std::vector<std::uint64_t> EvalReport::seeds() const {
  std::vector<std::uint64_t> out;
  for (const auto& r : runs) out.push_back(r.seed);
  return out;
}

double EvalReport::median_convergence_step() const {
  std::vector<double> v;
  for (const auto& r : runs) v.push_back(static_cast<double>(r.convergence_step));
  return median(v);
}

double EvalReport::median_best_score() const {
  std::vector<double> v;
  for (const auto& r : runs) v.push_back(r.best_score);
  return median(v);
}

nlohmann::ordered_json to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["variant"] = report.variant;
  j["environment"] = report.environment;
  j["tier"] = report.tier;
  j["seeds"] = report.seeds();
  auto runs = nlohmann::ordered_json::array();
  for (const auto& r : report.runs) {
    nlohmann::ordered_json rj;
    rj["seed"] = r.seed;
    rj["convergence_step"] = r.convergence_step;
    rj["best_score"] = r.best_score;
    rj["final_loss"] = r.final_loss;
    auto evals = nlohmann::ordered_json::array();
    for (const auto& p : r.evaluations) {
      evals.push_back({{"step", p.step},
                       {"returns", p.returns},
                       {"normalized_mean", p.normalized_mean},
                       {"normalized_std", p.normalized_std}});
    }
    rj["evaluations"] = std::move(evals);
    runs.push_back(std::move(rj));
  }
  j["runs"] = std::move(runs);
  if (!report.runs.empty()) {
    j["median_convergence_step"] = report.median_convergence_step();
    j["median_best_score"] = report.median_best_score();
  }
  return j;
}

void write_eval_report(const std::filesystem::path& path, const EvalReport& report) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::io, "cannot write report " + path.string());
  os << to_json(report).dump(2) << '\n';
}

}  // namespace lmrl
