#include "lmrl/finetune.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "lmrl/error.hpp"
#include "lmrl/format.hpp"

namespace lmrl {

std::string_view to_string(InitMode mode) { return mode == InitMode::random ? "random" : "pretrained"; }

InitMode parse_init_mode(std::string_view name) {
  if (name == "random") return InitMode::random;
  if (name == "pretrained") return InitMode::pretrained;
  fail(ErrorKind::config, "init must be 'random' or 'pretrained', got '" + std::string(name) + "'");
}

void FinetuneConfig::validate() const {
  loss.validate();
  if (context < 1 || batch < 1 || steps < 1) fail(ErrorKind::config, "finetuning needs context, batch, steps >= 1");
  if (anchor_refresh < 0) fail(ErrorKind::config, "anchor_refresh must be >= 0");
  if (eval_every < 1 || eval_episodes < 1 || log_every < 1) fail(ErrorKind::config, "eval cadence must be positive");
  if (rtg_scale && !(*rtg_scale > 0.0f)) fail(ErrorKind::config, "rtg_scale must be positive");
  if (dropout < 0.0f || dropout >= 1.0f) fail(ErrorKind::config, "dropout must lie in [0, 1)");
  if (target_return && !std::isfinite(*target_return)) fail(ErrorKind::config, "target return must be finite");
}

float default_rtg_scale(const Environment& env) { return env.name() == "pointmass" ? 10.0f : 1.0f; }

DecisionModel make_decision_model(const FinetuneConfig& config, const Environment& env, const Checkpoint* language_model) {
  TransformerConfig backbone_cfg;
  std::optional<Transformer> backbone;
  if (config.init == InitMode::pretrained) {
    if (!language_model) fail(ErrorKind::io, "pretrained init needs a language-model checkpoint");
    if (language_model->kind != "lm") fail(ErrorKind::format, "pretrained init needs an lm checkpoint");
    backbone_cfg = language_model->config;
    backbone_cfg.dropout = config.dropout;
    if (3 * config.context > backbone_cfg.max_positions) {
      fail(ErrorKind::context_length, "pretrained positional table has " + std::to_string(backbone_cfg.max_positions) +
                                          " rows, context " + std::to_string(config.context) + " needs " +
                                          std::to_string(3 * config.context));
    }
    backbone.emplace(backbone_cfg, config.seed);
    auto params = backbone->parameters();
    copy_tensors_from(*language_model, params);
  } else {
    backbone_cfg = TransformerConfig::preset(config.size);
    backbone_cfg.dropout = config.dropout;
    backbone_cfg.max_positions = std::max(backbone_cfg.max_positions, 3 * config.context);
    backbone.emplace(backbone_cfg, config.seed);
  }
  if (config.random_positions) backbone->reinitialize_positions(config.seed ^ 0x6a09e667f3bcc909ULL);

  auto dcfg = DecisionConfig::for_environment(env, backbone_cfg);
  dcfg.context = config.context;
  dcfg.rtg_scale = config.rtg_scale.value_or(default_rtg_scale(env));
  dcfg.loss_positions = config.loss_positions;
  return DecisionModel(dcfg, std::move(*backbone), config.seed);
}

EvalPoint evaluate_policy(DecisionModel& model, const Environment& env, const DatasetManifest& manifest,
                          float target_return, int context, int episodes, std::uint64_t seed, long step) {
  const auto starts = evaluation_starts(env, seed, episodes);
  const auto traces = rollout_batch(model, env, target_return, context, starts);
  EvalPoint p;
  p.step = step;
  double sum = 0.0, sq = 0.0;
  for (const auto& t : traces) {
    p.returns.push_back(t.episode_return);
    const double s = normalized_score(t.episode_return, manifest.random_score, manifest.expert_score);
    sum += s;
    sq += s * s;
  }
  const double n = static_cast<double>(traces.size());
  p.normalized_mean = sum / n;
  p.normalized_std = std::sqrt(std::max(0.0, sq / n - p.normalized_mean * p.normalized_mean));
  return p;
}

FinetuneResult finetune(const FinetuneConfig& config, const FinetuneInputs& inputs, const FinetuneObserver& observer) {
  config.validate();
  if (!inputs.dataset || inputs.dataset->episodes.empty()) fail(ErrorKind::contract, "finetuning needs a nonempty dataset");
  const Dataset& data = *inputs.dataset;
  const auto env = make_environment(data.manifest.environment);
  DecisionModel model = make_decision_model(config, *env, inputs.language_model);
  model.set_state_normalization(StateNormalization::from_dataset(data.episodes, env->state_dim()));
  if (config.frozen) model.backbone().set_frozen(true);

  const bool use_lm = config.loss.lambda2 > 0.0f && !config.frozen;
  if (use_lm && !inputs.corpus) fail(ErrorKind::config, "lambda2 > 0 needs a co-training corpus");

  Tensor anchors;
  const auto cluster_embeddings = [&] {
    const Tensor& table = model.backbone().weights().token_embedding;
    const int rows = std::min(table.dim(0), kByteVocab);
    std::vector<int> ids(static_cast<std::size_t>(rows));
    std::iota(ids.begin(), ids.end(), 0);
    Tensor byte_rows;
    {
      NoGradGuard g;
      byte_rows = gather_rows(table, ids).detach();
    }
    anchors = kmeans(byte_rows, std::min(config.loss.clusters, rows), config.seed).centers;
  };
  if (config.loss.lambda1 > 0.0f) cluster_embeddings();

  AdamW optimizer(model.parameters(), {config.learning_rate, 0.9f, 0.999f, 1e-8f, config.weight_decay, config.warmup,
                                       config.clip_norm});
  std::mt19937_64 rng(config.seed + 17);
  std::mt19937_64 lm_rng(config.seed + 29);
  std::mt19937_64 probe_rng(config.seed + 7);
  const auto& dcfg = model.config();
  const TrajectoryBatch probe = sample_batch(data.episodes, std::max(config.batch, kProbeWindows), dcfg, probe_rng);
  const auto probe_loss = [&] {
    NoGradGuard g;
    const bool was = model.backbone().training();
    model.set_training(false);
    const float l = action_loss(model, probe).item();
    model.set_training(was);
    return l;
  };

  FinetuneResult result;
  result.report.seed = config.seed;
  result.initial_action_loss = probe_loss();
  const float target = config.target_return.value_or(static_cast<float>(data.manifest.expert_score));
  model.set_training(true);

  double run_action = 0.0, run_total = 0.0;
  int run_count = 0;
  std::vector<TokenSequence> windows(static_cast<std::size_t>(config.loss.cotrain_batch));
  for (int step = 1; step <= config.steps; ++step) {
    const long schedule_step = step - 1;
    const auto w = loss_weights(schedule_step, config.loss);
    const TrajectoryBatch batch = sample_batch(data.episodes, config.batch, dcfg, rng);
    const auto out = model.run(batch);
    const Tensor mse = action_loss(model, batch, out);
    Tensor cos, lm;
    if (w.lambda1 != 0.0f && config.anchor_refresh > 0 && step > 1 && (step - 1) % config.anchor_refresh == 0) {
      cluster_embeddings();
    }
    if (w.lambda1 != 0.0f) {
      cos = scale(l_cos(out.inputs, anchors, batch.token_mask(), config.anchor_reduction),
                  1.0f / static_cast<float>(batch.batch));
    }
    if (w.lambda2 != 0.0f && use_lm) {
      for (auto& win : windows) win = inputs.corpus->sample_train_window(lm_rng, config.loss.cotrain_window);
      lm = lm_loss(model.backbone(), windows);
    }
    LossConfig effective = config.loss;
    if (!use_lm) effective.lambda2 = 0.0f;
    const Tensor total = combined_loss(mse, cos, lm, schedule_step, effective);
    total.backward();
    optimizer.step();

    run_action += mse.item();
    run_total += total.item();
    ++run_count;
    if (step % config.log_every == 0 || step == config.steps) {
      result.metrics.push_back({step, static_cast<float>(run_action / run_count), static_cast<float>(run_total / run_count),
                                w.lambda1, use_lm ? w.lambda2 : 0.0f});
      run_action = run_total = 0.0;
      run_count = 0;
    }
    if (step % config.eval_every == 0 || step == config.steps) {
      auto point = evaluate_policy(model, *env, data.manifest, target, config.context, config.eval_episodes,
                                   config.eval_seed, step);
      result.report.evaluations.push_back(point);
      if (observer) observer(point);
    }
  }
  model.set_training(false);
  result.final_action_loss = probe_loss();
  result.report.convergence_step = convergence_step(result.report.evaluations);
  result.report.best_score = best_score(result.report.evaluations);
  result.report.final_loss = result.final_action_loss;
  result.checkpoint = make_decision_checkpoint(model, config.steps);
  result.checkpoint.meta["environment"] = data.manifest.environment;
  result.checkpoint.meta["target_return"] = target;
  result.checkpoint.rng_state = serialize_rng(rng);
  result.checkpoint.optimizer = OptimizerSnapshot{optimizer.steps_taken(), optimizer.moments()};
  return result;
}

void write_train_metrics(const std::filesystem::path& path, const std::vector<TrainMetric>& metrics) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::io, "cannot write metrics " + path.string());
  os << "step,action_loss,total_loss,lambda1,lambda2\n";
  for (const auto& m : metrics) {
    os << m.step << ',' << format_float(m.action_loss) << ',' << format_float(m.total_loss) << ','
       << format_float(m.lambda1) << ',' << format_float(m.lambda2) << '\n';
  }
}

void write_eval_curve(const std::filesystem::path& path, const std::vector<EvalPoint>& curve) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::io, "cannot write curve " + path.string());
  os << "step,normalized_mean,normalized_std,returns\n";
  for (const auto& p : curve) {
    os << p.step << ',' << format_double(p.normalized_mean) << ',' << format_double(p.normalized_std) << ',';
    for (std::size_t i = 0; i < p.returns.size(); ++i) os << (i ? ";" : "") << format_double(p.returns[i]);
    os << '\n';
  }
}

}  // namespace lmrl
