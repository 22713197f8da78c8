// End-to-end acceptance suite: one PASS/FAIL line per criterion.
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include "lmrl/error.hpp"
#include "lmrl/experiment.hpp"
#include "lmrl/gradsuite.hpp"
#include "lmrl/ops.hpp"

namespace fs = std::filesystem;
using namespace lmrl;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(float)) == 0;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

fs::path scratch_dir() {
  const auto dir = fs::temp_directory_path() / "lmrl_acceptance";
  fs::create_directories(dir);
  return dir;
}

// Shared state: the desk-scale language model from criterion 6 is reused by 7-10.
std::optional<Checkpoint> g_lm;
std::optional<Corpus> g_corpus;
std::optional<Dataset> g_pointmass;

const Corpus& corpus() {
  if (!g_corpus) g_corpus.emplace(Corpus::from_file(fs::path(LMRL_DATA_DIR) / "corpus.txt"));
  return *g_corpus;
}

const Dataset& pointmass_data() {
  if (!g_pointmass) {
    PointMass env;
    g_pointmass.emplace(generate_dataset(env, "medium-expert", 100, 0));
  }
  return *g_pointmass;
}

const Checkpoint& language_model() {
  if (!g_lm) {
    // Criterion 6 did not run or failed before producing a model.
    g_lm = pretrain(PretrainConfig::profile("desk"), corpus()).checkpoint;
  }
  return *g_lm;
}

// Finetuning recipe used by the end-to-end criteria (7 and 8).
FinetuneConfig desk_recipe() {
  FinetuneConfig c;
  c.context = 5;
  c.batch = 32;
  c.steps = 400;
  c.learning_rate = 1e-4f;
  c.warmup = 100;
  c.dropout = 0.0f;
  c.loss.lambda1 = 0.0f;
  c.loss.lambda2 = 0.0f;
  c.loss.decay_end_step = 200;
  c.eval_every = 20;
  c.eval_episodes = 20;
  c.log_every = 20;
  return c;
}

// 1 -------------------------------------------------------------------------
Outcome gradient_oracle() {
  double worst = 0.0;
  std::string worst_op;
  for (const auto& r : run_gradient_suite(20)) {
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_op = r.op;
    }
  }
  return {worst <= 2e-3, "worst max relative error " + fmt(worst) + " (" + worst_op + ") over 20 seeds, bound 2e-3"};
}

// 2 -------------------------------------------------------------------------
Outcome attention_contracts() {
  TransformerConfig cfg;
  cfg.model_dim = 16;
  cfg.num_heads = 4;
  cfg.num_layers = 2;
  cfg.max_positions = 32;
  cfg.vocab_size = 11;
  cfg.dropout = 0.0f;
  Transformer model(cfg, 3);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(-0.5f, 0.5f);
  for (auto& p : model.parameters()) {
    for (float& v : p.value.data()) v = u(rng);
  }
  const int T = 12;
  std::vector<int> pos(T);
  std::iota(pos.begin(), pos.end(), 0);
  bool causal = true;
  double worst_row = 0.0;
  bool upper_zero = true;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = Tensor::uniform({T, 16}, -1.0f, 1.0f, rng);
    AttentionRecord record;
    const Tensor base = model.forward(x, {1, T, pos, {}}, &record);
    for (const auto& cap : record.layers) {
      for (int h = 0; h < cap.heads; ++h) {
        for (int q = 0; q < T; ++q) {
          double s = 0.0;
          for (int k = 0; k < T; ++k) {
            const float w = cap.weights[static_cast<std::size_t>((h * T + q) * T + k)];
            s += w;
            if (k > q && w != 0.0f) upper_zero = false;
          }
          worst_row = std::max(worst_row, std::abs(s - 1.0));
        }
      }
    }
    const int t = trial % T;
    Tensor y = x.clone();
    for (int j = 0; j < 16; ++j) y.data()[static_cast<std::size_t>(t * 16 + j)] += 3.0f;
    const Tensor moved = model.forward(y, {1, T, pos, {}});
    for (int i = 0; i < t * 16; ++i) {
      if (base.at(static_cast<std::size_t>(i)) != moved.at(static_cast<std::size_t>(i))) causal = false;
    }
  }
  return {causal && upper_zero && worst_row <= 1e-6,
          std::string("future perturbations ") + (causal ? "never" : "DO") + " change earlier outputs; masked weights " +
              (upper_zero ? "exactly 0" : "NONZERO") + "; max |row sum - 1| " + fmt(worst_row) + " (bound 1e-6)"};
}

// 3 -------------------------------------------------------------------------
double l_cos_oracle(const Tensor& x, const Tensor& a) {
  const int m = x.dim(0), k = a.dim(0), n = x.dim(1);
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    double best = -2.0;
    for (int j = 0; j < k; ++j) {
      double dot = 0.0, xx = 0.0, aa = 0.0;
      for (int d = 0; d < n; ++d) {
        const double xv = x.at(static_cast<std::size_t>(i * n + d));
        const double av = a.at(static_cast<std::size_t>(j * n + d));
        dot += xv * av;
        xx += xv * xv;
        aa += av * av;
      }
      best = std::max(best, dot / std::sqrt(xx * aa));
    }
    total -= best;
  }
  return total;
}

Outcome l_cos_correctness() {
  double oracle_err = 0.0, scale_err = 0.0;
  bool kv_exact = true;
  std::mt19937_64 frng(77);
  std::uniform_real_distribution<float> factor(0.1f, 10.0f);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor x = Tensor::normal({12, 8}, 1.0f, rng);
    const Tensor a = Tensor::normal({5, 8}, 1.0f, rng);
    const float v = l_cos(x, a).item();
    oracle_err = std::max(oracle_err, std::abs(v - l_cos_oracle(x, a)));

    // Positive rescaling, one row of x at a time.
    for (int i = 0; i < 12; ++i) {
      Tensor xs = x.clone();
      const float f = factor(frng);
      for (int d = 0; d < 8; ++d) xs.data()[static_cast<std::size_t>(i * 8 + d)] *= f;
      scale_err = std::max(scale_err, static_cast<double>(std::abs(l_cos(xs, a).item() - v)));
    }
    // Clustering with K = V returns the table itself.
    const Tensor table = Tensor::normal({16, 8}, 1.0f, rng);
    if (l_cos(x, kmeans(table, 16, seed).centers).item() != l_cos(x, table).item()) kv_exact = false;
  }
  // Anchor coincidence: N sequences of 3 tokens each equal to an anchor.
  const int N = 5;
  std::vector<float> anchor_data(9, 0.0f), rows;
  for (int j = 0; j < 3; ++j) anchor_data[static_cast<std::size_t>(j * 3 + j)] = 1.0f;
  for (int i = 0; i < 3 * N; ++i) {
    for (int d = 0; d < 3; ++d) rows.push_back(d == i % 3 ? 2.5f : 0.0f);
  }
  const float coincide = l_cos(Tensor({3 * N, 3}, rows), Tensor({3, 3}, anchor_data)).item();
  const bool pass = oracle_err <= 1e-5 && coincide == -3.0f * N && scale_err <= 1e-6 && kv_exact;
  return {pass, "oracle error " + fmt(oracle_err) + " (bound 1e-5); coincidence " + fmt(coincide) + " vs -3N = " +
                    fmt(-3.0 * N) + "; rescaling change " + fmt(scale_err) + " (bound 1e-6); K=V no-op " +
                    (kv_exact ? "exact" : "NOT exact")};
}

// 4 -------------------------------------------------------------------------
Outcome schedule_exactness() {
  bool ok = true;
  for (float initial : {0.1f, 0.2f, 0.4f}) {
    ok = ok && lambda_schedule(0, initial, 5000) == initial;
    ok = ok && lambda_schedule(2500, initial, 5000) == initial / 2.0f;
    for (long s : {5000L, 5001L, 7777L, 100000L}) ok = ok && lambda_schedule(s, initial, 5000) == 0.0f;
  }
  LossConfig cfg;
  const auto w = loss_weights(5000, cfg);
  ok = ok && w.lambda1 == 0.0f && w.lambda2 == 0.0f;
  return {ok, "lambda(0) = initial, lambda(2500) = initial/2, lambda(>=5000) = 0 for initial in {0.1, 0.2, 0.4}"};
}

// 5 -------------------------------------------------------------------------
Outcome normalized_endpoints() {
  bool ok = true;
  PointMass pm;
  GridWorld grid;
  for (const Environment* env : {static_cast<const Environment*>(&pm), static_cast<const Environment*>(&grid)}) {
    const auto refs = reference_scores(*env, 0);
    ok = ok && normalized_score(refs.random_score, refs.random_score, refs.expert_score) == 0.0;
    ok = ok && normalized_score(refs.expert_score, refs.random_score, refs.expert_score) == 100.0;
  }
  ok = ok && normalized_score(-30.0, -50.0, -10.0) == 50.0;
  ok = ok && normalized_score(0.5, 0.0, 1.0) == 50.0;
  return {ok, "random -> 0, expert -> 100 on both environments' reference scores; midpoint -> 50"};
}

// 6 -------------------------------------------------------------------------
Outcome lm_sanity() {
  const auto window = tokenize("sixteen bytes!!\n");
  Transformer tiny(TransformerConfig::preset("micro"), 6);
  AdamW opt(tiny.parameters(), {1e-2f, 0.9f, 0.999f, 1e-8f, 0.0f, 10, 1.0f});
  for (int step = 0; step < 400; ++step) {
    Tensor l = lm_loss(tiny, window);
    l.backward();
    opt.step();
  }
  float overfit = 0.0f;
  {
    NoGradGuard g;
    overfit = lm_loss(tiny, window).item();
  }

  const auto t0 = std::chrono::steady_clock::now();
  auto result = pretrain(PretrainConfig::profile("desk"), corpus());
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  const double unigram = unigram_entropy_bits(corpus().validation());
  g_lm = result.checkpoint;
  save_checkpoint(scratch_dir() / "lm_desk.ckpt", *g_lm);
  const bool pass = result.final_val_bpb < unigram && overfit < 0.05f && minutes < 15.0;
  return {pass, "validation " + fmt(result.final_val_bpb) + " bits/byte vs unigram " + fmt(unigram) +
                    "; 16-byte overfit loss " + fmt(overfit) + " (bound 0.05); desk pretraining " + fmt(minutes, 3) +
                    " min (bound 15)"};
}

// 7 -------------------------------------------------------------------------
Outcome transfer_effect() {
  ExperimentSpec spec;
  spec.recipe = "transfer";
  spec.base = desk_recipe();
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentInputs in{&pointmass_data(), {&language_model()}, &corpus()};
  const auto result = run_experiment(spec, in);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  write_experiment(result, scratch_dir() / "transfer");
  const auto& pre = result.reports[0];
  const auto& rnd = result.reports[1];
  std::string per_seed;
  for (std::size_t s = 0; s < pre.runs.size(); ++s) {
    per_seed += (s ? ", " : "") + std::to_string(pre.runs[s].convergence_step) + "/" +
                std::to_string(rnd.runs[s].convergence_step);
  }
  const bool faster = pre.median_convergence_step() < rnd.median_convergence_step();
  const bool as_good = pre.median_best_score() >= rnd.median_best_score() - 1.0;
  return {faster && as_good && minutes < 30.0,
          "median convergence step pretrained " + fmt(pre.median_convergence_step()) + " vs random " +
              fmt(rnd.median_convergence_step()) + " (per seed " + per_seed + "); median best " +
              fmt(pre.median_best_score()) + " vs " + fmt(rnd.median_best_score()) + " (need >= random - 1); " +
              fmt(minutes, 3) + " min (bound 30)"};
}

// 8 -------------------------------------------------------------------------
// Only projections and the action head train when frozen; they take a larger step.
constexpr float kFrozenLearningRate = 1e-3f;

Outcome freezing() {
  const Checkpoint& lm = language_model();
  std::vector<double> ft_best, fr_best;
  bool identical = true;
  double worst_drop = 1.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    FinetuneConfig cfg = desk_recipe();
    cfg.seed = seed;
    cfg.init = InitMode::pretrained;
    FinetuneInputs in{&pointmass_data(), &lm, &corpus()};

    cfg.frozen = true;
    cfg.learning_rate = kFrozenLearningRate;
    const auto frozen = finetune(cfg, in);
    for (const auto& t : lm.tensors) {
      if (!same_bits(t.value, frozen.checkpoint.tensor(t.name))) identical = false;
    }
    const double drop = 1.0 - frozen.final_action_loss / frozen.initial_action_loss;
    worst_drop = std::min(worst_drop, drop);
    fr_best.push_back(frozen.report.best_score);

    cfg.frozen = false;
    cfg.learning_rate = desk_recipe().learning_rate;
    ft_best.push_back(finetune(cfg, in).report.best_score);
  }
  const double ft = median(ft_best), fr = median(fr_best);
  return {identical && worst_drop >= 0.2 && ft > fr,
          std::string("frozen block parameters ") + (identical ? "bit-identical" : "CHANGED") +
              "; smallest frozen loss drop " + fmt(100.0 * worst_drop, 3) + "% (need >= 20%); median best finetuned " +
              fmt(ft) + " vs frozen " + fmt(fr)};
}

// 9 -------------------------------------------------------------------------
Outcome ablation_harness() {
  ExperimentSpec spec;
  spec.recipe = "ablation";
  spec.base = desk_recipe();
  spec.base.steps = 40;
  spec.base.eval_every = 20;
  spec.base.eval_episodes = 4;
  spec.base.batch = 8;
  spec.base.loss.lambda1 = 0.1f;
  spec.base.loss.lambda2 = 0.2f;
  spec.base.loss.cotrain_batch = 2;
  spec.seeds = {0, 1, 2};
  ExperimentInputs in{&pointmass_data(), {&language_model()}, &corpus()};
  const auto dir = scratch_dir() / "ablation";
  fs::remove_all(dir);
  write_experiment(run_experiment(spec, in), dir / "a");
  write_experiment(run_experiment(spec, in), dir / "b");

  std::ifstream is(dir / "a" / "comparison.csv");
  std::string header, line;
  std::getline(is, header);
  std::vector<std::string> variants;
  bool well_formed = header == "variant,seed_0,seed_1,seed_2,median,ci_low,ci_high,median_convergence_step";
  while (std::getline(is, line)) {
    variants.push_back(line.substr(0, line.find(',')));
    if (std::count(line.begin(), line.end(), ',') != 7) well_formed = false;
    if (line.find(",,") != std::string::npos) well_formed = false;
  }
  well_formed = well_formed && variants == std::vector<std::string>{"full", "no-lcos", "no-llm", "random-pos"};
  bool deterministic = true;
  for (const auto& entry : fs::recursive_directory_iterator(dir / "a")) {
    if (!entry.is_regular_file()) continue;
    const auto twin = dir / "b" / fs::relative(entry.path(), dir / "a");
    if (!fs::exists(twin) || slurp(entry.path()) != slurp(twin)) deterministic = false;
  }
  return {well_formed && deterministic,
          "4 variants x 3 seeds; comparison.csv " + std::string(well_formed ? "well formed" : "MALFORMED") +
              "; repeated run " + (deterministic ? "byte-identical" : "DIFFERS")};
}

// 10 ------------------------------------------------------------------------
Outcome reproducibility() {
  FinetuneConfig cfg = desk_recipe();
  cfg.init = InitMode::pretrained;
  cfg.steps = 30;
  cfg.batch = 8;
  cfg.eval_every = 15;
  cfg.eval_episodes = 3;
  cfg.log_every = 5;
  cfg.dropout = 0.2f;
  cfg.loss.lambda1 = 0.1f;
  cfg.loss.lambda2 = 0.2f;
  cfg.loss.cotrain_batch = 2;
  cfg.seed = 3;
  FinetuneInputs in{&pointmass_data(), &language_model(), &corpus()};
  const auto dir = scratch_dir() / "repro";
  fs::create_directories(dir);
  const auto a = finetune(cfg, in);
  const auto b = finetune(cfg, in);
  write_train_metrics(dir / "a_metrics.csv", a.metrics);
  write_train_metrics(dir / "b_metrics.csv", b.metrics);
  write_eval_curve(dir / "a_curve.csv", a.report.evaluations);
  write_eval_curve(dir / "b_curve.csv", b.report.evaluations);
  const bool csv_same =
      slurp(dir / "a_metrics.csv") == slurp(dir / "b_metrics.csv") && slurp(dir / "a_curve.csv") == slurp(dir / "b_curve.csv");

  save_checkpoint(dir / "decision.ckpt", a.checkpoint);
  DecisionModel original = load_decision_model(a.checkpoint);
  DecisionModel reloaded = load_decision_model(load_checkpoint(dir / "decision.ckpt"));
  std::mt19937_64 rng(11);
  const auto batch = sample_batch(pointmass_data().episodes, 16, original.config(), rng);
  bool decision_same = false, lm_same = false;
  {
    NoGradGuard g;
    decision_same = same_bits(original.predict_actions(batch), reloaded.predict_actions(batch));
    Transformer lm_a = load_lm(language_model());
    save_checkpoint(scratch_dir() / "lm_roundtrip.ckpt", language_model());
    Transformer lm_b = load_lm(load_checkpoint(scratch_dir() / "lm_roundtrip.ckpt"));
    const auto window = corpus().validation_windows(2, 32);
    lm_same = lm_loss(lm_a, window).item() == lm_loss(lm_b, window).item();
    const std::vector<int> pos = [] {
      std::vector<int> p(32);
      std::iota(p.begin(), p.end(), 0);
      return p;
    }();
    const Tensor x = embedding(lm_a.weights().token_embedding, window[0].tokens);
    lm_same = lm_same && same_bits(lm_a.forward(x, {1, 32, pos, {}}), lm_b.forward(x, {1, 32, pos, {}}));
  }
  return {csv_same && decision_same && lm_same,
          std::string("repeated (config, seed) metrics CSVs ") + (csv_same ? "byte-identical" : "DIFFER") +
              "; decision checkpoint round trip " + (decision_same ? "bit-exact" : "NOT exact") +
              "; language-model checkpoint round trip " + (lm_same ? "bit-exact" : "NOT exact")};
}

// 11 ------------------------------------------------------------------------
std::pair<double, double> bootstrap_oracle(const std::vector<double>& x, int resamples, double level, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
  std::vector<double> means;
  for (int r = 0; r < resamples; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[pick(rng)];
    means.push_back(s / static_cast<double>(x.size()));
  }
  std::sort(means.begin(), means.end());
  auto q = [&](double p) {
    const double h = p * (resamples - 1);
    const auto i = static_cast<std::size_t>(h);
    if (i + 1 >= means.size()) return means[i];
    return means[i] + (h - static_cast<double>(i)) * (means[i + 1] - means[i]);
  };
  return {q((1.0 - level) / 2.0), q(1.0 - (1.0 - level) / 2.0)};
}

Outcome bootstrap_exact() {
  bool exact = true;
  std::vector<double> mixed;
  for (int i = 0; i < 10; ++i) mixed.insert(mixed.end(), {0.0, 100.0});
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(50.0, 20.0);
  std::vector<std::vector<double>> samples{mixed};
  for (int k = 0; k < 9; ++k) {
    std::vector<double> x(5);
    for (double& v : x) v = n(rng);
    samples.push_back(x);
  }
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const auto ci = bootstrap_ci(samples[k], 2000, 0.95, k);
    const auto o = bootstrap_oracle(samples[k], 2000, 0.95, k);
    if (ci.low != o.first || ci.high != o.second) exact = false;
  }
  const auto flat = bootstrap_ci(std::vector<double>(8, 73.5), 2000, 0.95, 1);
  const bool zero = flat.low == 73.5 && flat.high == 73.5;
  const auto m = bootstrap_ci(mixed, 2000, 0.95, 0);
  return {exact && zero, std::string("10 instances ") + (exact ? "match the loop oracle exactly" : "DIFFER from the oracle") +
                             "; constant input width " + fmt(flat.high - flat.low) + "; {0,100}x10 interval [" +
                             fmt(m.low) + ", " + fmt(m.high) + "]"};
}

}  // namespace

// Usage: acceptance [--lm checkpoint] [criterion numbers...]; no numbers runs all.
int main(int argc, char** argv) {
  std::vector<std::size_t> selected;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--lm" && i + 1 < argc) {
      g_lm = load_checkpoint(argv[++i]);
    } else {
      selected.push_back(static_cast<std::size_t>(std::stoul(arg)));
    }
  }
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient oracle", gradient_oracle},
      {"attention contracts", attention_contracts},
      {"alignment loss correctness", l_cos_correctness},
      {"schedule exactness", schedule_exactness},
      {"normalized-score endpoints", normalized_endpoints},
      {"language-model pretraining sanity", lm_sanity},
      {"transfer effect", transfer_effect},
      {"freezing", freezing},
      {"ablation harness", ablation_harness},
      {"reproducibility", reproducibility},
      {"bootstrap interval", bootstrap_exact},
  };
  int failures = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), i + 1) == selected.end()) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failures;
    std::cout << "criterion " << (i + 1) << " [" << (o.pass ? "PASS" : "FAIL") << "] " << criteria[i].first << ": "
              << o.detail << " (" << fmt(secs, 3) << " s)" << std::endl;
  }
  std::cout << (ran - failures) << "/" << ran << " criteria passed"
            << std::endl;
  return failures == 0 ? 0 : 1;
}
