// lmrl: pretrain, generate data, finetune, evaluate, export attention, run
// experiment recipes, and check gradients from the command line.
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "json.hpp"
#include "lmrl/error.hpp"
#include "lmrl/experiment.hpp"
#include "lmrl/format.hpp"
#include "lmrl/gradsuite.hpp"
#include "lmrl/runconfig.hpp"

namespace fs = std::filesystem;
using namespace lmrl;

namespace {

fs::path output_dir(const std::string& flag, const std::string& command) {
  if (!flag.empty()) return flag;
  const char* root = std::getenv("LMRL_OUTPUT_ROOT");
  return fs::path(root && *root ? root : "lmrl_out") / command;
}

void announce(const fs::path& p) { std::cout << "artifact: " << p.string() << '\n'; }

// Every RunConfig key becomes a flag (underscores as dashes). Values given on
// the command line override the config file.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::map<std::string, bool> switches;
  CLI::App* app = nullptr;

  void attach(CLI::App* sub) {
    app = sub;
    sub->add_option("--config", config_path, "JSON run config");
    const auto defaults = to_json(RunConfig{});
    for (const auto& [key, value] : defaults.items()) {
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      if (key == "lm_checkpoint") flag += ",--lm";
      if (key == "learning_rate") flag += ",--lr";
      if (key == "frozen") flag += ",--freeze";
      if (value.is_boolean()) {
        sub->add_flag(flag, switches[key], key);
      } else {
        sub->add_option(flag, values[key], key);
      }
    }
  }

  RunConfig resolve() const {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    nlohmann::json overrides = nlohmann::json::object();
    for (const auto& [key, text] : values) {
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      if (app->count(flag) == 0) continue;
      auto parsed = nlohmann::json::parse(text, nullptr, false);
      overrides[key] = parsed.is_discarded() || parsed.is_object() || parsed.is_array() ? nlohmann::json(text) : parsed;
      if (overrides[key].is_number() && (key == "dataset" || key == "corpus" || key == "lm_checkpoint")) {
        overrides[key] = text;
      }
    }
    for (const auto& [key, on] : switches) {
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      if (app->count(flag) > 0) overrides[key] = on;
    }
    cfg = run_config_from_json(overrides, cfg);
    cfg.validate();
    return cfg;
  }
};

void echo_config(const RunConfig& cfg, const fs::path& out) {
  const auto j = to_json(cfg);
  std::cout << "config: " << j.dump() << '\n';
  fs::create_directories(out);
  std::ofstream(out / "config.json") << j.dump(2) << '\n';
  announce(out / "config.json");
}

Corpus open_corpus(const std::string& path) {
  return Corpus::from_file(path.empty() ? fs::path(LMRL_DATA_DIR) / "corpus.txt" : fs::path(path));
}

Dataset obtain_dataset(const RunConfig& cfg, const fs::path& out) {
  if (!cfg.dataset.empty()) return load_dataset(cfg.dataset);
  const auto env = make_environment(cfg.environment);
  Dataset d = generate_dataset(*env, cfg.tier, cfg.episodes, cfg.data_seed);
  const auto stem = out / "dataset" / (cfg.environment + "-" + cfg.tier);
  save_dataset(d, stem);
  announce(fs::path(stem.string() + ".jsonl"));
  announce(fs::path(stem.string() + ".manifest.json"));
  return d;
}

std::optional<Checkpoint> maybe_lm(const RunConfig& cfg, bool needed) {
  if (cfg.lm_checkpoint.empty()) {
    if (needed) fail(ErrorKind::io, "pretrained init needs --lm-checkpoint (produce one with `lmrl pretrain`)");
    return std::nullopt;
  }
  return load_checkpoint(cfg.lm_checkpoint);
}

bool needs_corpus(const FinetuneConfig& f) { return f.loss.lambda2 > 0.0f && !f.frozen; }

nlohmann::ordered_json to_json(const EvalPoint& p) {
  nlohmann::ordered_json j;
  j["step"] = p.step;
  j["returns"] = p.returns;
  j["normalized_mean"] = p.normalized_mean;
  j["normalized_std"] = p.normalized_std;
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Language-model pretraining and trajectory finetuning laboratory"};
  app.require_subcommand(1);

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Pretrain a byte-level language model");
  std::string pre_profile = "desk", pre_corpus, pre_size, pre_out;
  int pre_steps = 0;
  std::uint64_t pre_seed = 0;
  float pre_lr = 0.0f;
  pre->add_option("--profile", pre_profile, "desk, tiny, or paper")->capture_default_str();
  pre->add_option("--corpus", pre_corpus, "text file (default: bundled corpus)");
  pre->add_option("--size", pre_size, "backbone preset (default from profile)");
  pre->add_option("--steps", pre_steps, "override step count");
  pre->add_option("--seed", pre_seed);
  pre->add_option("--lr", pre_lr, "override learning rate");
  pre->add_option("--out", pre_out);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "Generate an offline dataset");
  ConfigFlags gen_flags;
  std::string gen_out;
  gen_flags.attach(gen);
  gen->add_option("--out", gen_out);

  // finetune
  auto* ft = app.add_subcommand("finetune", "Finetune a decision model on an offline dataset");
  ConfigFlags ft_flags;
  std::string ft_out;
  ft_flags.attach(ft);
  ft->add_option("--out", ft_out);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Roll out a decision checkpoint");
  std::string ev_ckpt, ev_dataset, ev_out;
  float ev_target = NAN;
  int ev_episodes = 10, ev_context = 0;
  std::uint64_t ev_seed = 1234;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--dataset", ev_dataset, "dataset stem whose manifest supplies reference scores");
  ev->add_option("--target-return", ev_target, "default: the target stored at training time");
  ev->add_option("--episodes", ev_episodes)->capture_default_str();
  ev->add_option("--context", ev_context, "default: the model's context");
  ev->add_option("--eval-seed", ev_seed)->capture_default_str();
  ev->add_option("--out", ev_out);

  // attention
  auto* at = app.add_subcommand("attention", "Export head-averaged attention maps");
  std::string at_ckpt, at_dataset, at_out;
  float at_temp = 0.1f;
  int at_episode = 0, at_end = 0, at_cell = 4;
  at->add_option("--checkpoint", at_ckpt)->required();
  at->add_option("--dataset", at_dataset, "dataset stem")->required();
  at->add_option("--temperature", at_temp)->capture_default_str();
  at->add_option("--episode", at_episode, "episode index")->capture_default_str();
  at->add_option("--end", at_end, "last timestep of the window (default: full context)");
  at->add_option("--cell", at_cell, "PGM pixels per token")->capture_default_str();
  at->add_option("--out", at_out);

  // experiment
  auto* ex = app.add_subcommand("experiment", "Run an experiment recipe over seeds");
  ConfigFlags ex_flags;
  std::string ex_recipe, ex_out;
  std::vector<int> ex_contexts;
  std::vector<std::string> ex_sizes, ex_extra_lms;
  ex->add_option("recipe", ex_recipe, "dt-baseline, transfer, ablation, freeze, context, model-size")->required();
  ex_flags.attach(ex);
  ex->add_option("--contexts", ex_contexts, "context lengths for the context recipe");
  ex->add_option("--sizes", ex_sizes, "presets for the model-size recipe");
  ex->add_option("--extra-lm", ex_extra_lms, "additional language-model checkpoints (model-size)");
  ex->add_option("--out", ex_out);

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient suite");
  int gc_seeds = 20;
  gc->add_option("--seeds", gc_seeds)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*pre) {
      auto cfg = PretrainConfig::profile(pre_profile);
      if (!pre_size.empty()) {
        const float dropout = cfg.model.dropout;
        cfg.model = TransformerConfig::preset(pre_size);
        cfg.model.dropout = dropout;
      }
      if (pre->count("--steps")) cfg.steps = pre_steps;
      if (pre->count("--lr")) cfg.learning_rate = pre_lr;
      cfg.seed = pre_seed;
      const auto out = output_dir(pre_out, "pretrain");
      const Corpus corpus = open_corpus(pre_corpus);
      std::cout << "corpus: " << corpus.size() << " bytes, validation unigram entropy "
                << unigram_entropy_bits(corpus.validation()) << " bits/byte\n";
      auto result = pretrain(cfg, corpus, [](const PretrainMetric& m) {
        std::cout << "step " << m.step << " train_loss " << m.train_loss << " val_bpb " << m.val_bpb << std::endl;
      });
      fs::create_directories(out);
      save_checkpoint(out / "lm.ckpt", result.checkpoint);
      announce(out / "lm.ckpt");
      write_pretrain_metrics(out / "metrics.csv", result.metrics);
      announce(out / "metrics.csv");
    } else if (*gen) {
      const auto cfg = gen_flags.resolve();
      const auto out = output_dir(gen_out, "data");
      echo_config(cfg, out);
      RunConfig fresh = cfg;
      fresh.dataset.clear();
      const auto d = obtain_dataset(fresh, out);
      std::cout << "mean return " << d.manifest.mean_return << " (random " << d.manifest.random_score << ", expert "
                << d.manifest.expert_score << ")\n";
    } else if (*ft) {
      const auto cfg = ft_flags.resolve();
      const auto out = output_dir(ft_out, "finetune");
      echo_config(cfg, out);
      const Dataset data = obtain_dataset(cfg, out);
      const auto lm = maybe_lm(cfg, cfg.finetune.init == InitMode::pretrained);
      std::optional<Corpus> corpus;
      if (needs_corpus(cfg.finetune)) corpus.emplace(open_corpus(cfg.corpus));
      FinetuneInputs in{&data, lm ? &*lm : nullptr, corpus ? &*corpus : nullptr};
      auto result = finetune(cfg.finetune, in, [](const EvalPoint& p) {
        std::cout << "step " << p.step << " normalized_score " << p.normalized_mean << " +- " << p.normalized_std
                  << std::endl;
      });
      std::cout << "best_score " << result.report.best_score << " convergence_step " << result.report.convergence_step
                << " action_loss " << result.initial_action_loss << " -> " << result.final_action_loss << '\n';
      save_checkpoint(out / "decision.ckpt", result.checkpoint);
      announce(out / "decision.ckpt");
      write_train_metrics(out / "metrics.csv", result.metrics);
      announce(out / "metrics.csv");
      write_eval_curve(out / "curve.csv", result.report.evaluations);
      announce(out / "curve.csv");
      EvalReport report{"finetune", data.manifest.environment, data.manifest.tier, {result.report}};
      write_eval_report(out / "report.json", report);
      announce(out / "report.json");
    } else if (*ev) {
      const auto ckpt = load_checkpoint(ev_ckpt);
      DecisionModel model = load_decision_model(ckpt);
      const auto env = make_environment(ckpt.meta.at("environment").get<std::string>());
      DatasetManifest manifest;
      if (!ev_dataset.empty()) {
        manifest = load_dataset(ev_dataset).manifest;
      } else {
        const auto refs = reference_scores(*env, 0);
        manifest.random_score = refs.random_score;
        manifest.expert_score = refs.expert_score;
      }
      const float target = std::isnan(ev_target) ? ckpt.meta.at("target_return").get<float>() : ev_target;
      const int context = ev_context > 0 ? ev_context : model.config().context;
      const auto point = evaluate_policy(model, *env, manifest, target, context, ev_episodes, ev_seed, ckpt.step);
      const auto j = to_json(point);
      std::cout << j.dump() << '\n';
      const auto out = output_dir(ev_out, "evaluate");
      fs::create_directories(out);
      std::ofstream(out / "eval.json") << j.dump(2) << '\n';
      announce(out / "eval.json");
    } else if (*at) {
      const auto ckpt = load_checkpoint(at_ckpt);
      DecisionModel model = load_decision_model(ckpt);
      const auto data = load_dataset(at_dataset);
      if (at_episode < 0 || at_episode >= static_cast<int>(data.episodes.size())) {
        fail(ErrorKind::contract, "episode index out of range");
      }
      const auto& traj = data.episodes[static_cast<std::size_t>(at_episode)];
      const int end = at_end > 0 ? std::min(at_end, traj.length()) : std::min(model.config().context, traj.length());
      auto batch = empty_batch(model.config());
      append_window(batch, traj, end, model.config().rtg_scale);
      const auto maps = attention_export(model, batch, at_temp, 0);
      const auto out = output_dir(at_out, "attention");
      for (const auto& p : write_attention(maps, out, at_cell)) announce(p);
    } else if (*ex) {
      const auto cfg = ex_flags.resolve();
      const auto out = output_dir(ex_out, "experiment") / ex_recipe;
      echo_config(cfg, out);
      ExperimentSpec spec;
      spec.recipe = ex_recipe;
      spec.base = cfg.finetune;
      spec.seeds.clear();
      for (int s = 0; s < cfg.seeds; ++s) spec.seeds.push_back(static_cast<std::uint64_t>(s));
      if (!ex_contexts.empty()) spec.contexts = ex_contexts;
      if (!ex_sizes.empty()) spec.sizes = ex_sizes;
      bool wants_lm = false, wants_corpus = false;
      for (const auto& v : recipe_variants(spec)) {
        wants_lm = wants_lm || v.config.init == InitMode::pretrained;
        wants_corpus = wants_corpus || needs_corpus(v.config);
      }
      const Dataset data = obtain_dataset(cfg, out);
      std::vector<Checkpoint> lms;
      if (auto lm = maybe_lm(cfg, wants_lm)) lms.push_back(std::move(*lm));
      for (const auto& p : ex_extra_lms) lms.push_back(load_checkpoint(p));
      std::optional<Corpus> corpus;
      if (wants_corpus) corpus.emplace(open_corpus(cfg.corpus));
      ExperimentInputs in;
      in.dataset = &data;
      in.corpus = corpus ? &*corpus : nullptr;
      for (const auto& lm : lms) in.language_models.push_back(&lm);
      const auto result = run_experiment(spec, in, [](const std::string& variant, const RunReport& r) {
        std::cout << variant << " seed " << r.seed << " best_score " << r.best_score << " convergence_step "
                  << r.convergence_step << std::endl;
      });
      for (const auto& p : write_experiment(result, out)) announce(p);
    } else if (*gc) {
      double worst = 0.0;
      for (const auto& r : run_gradient_suite(gc_seeds)) {
        std::cout << r.op << " max_rel_error " << format_double(r.max_rel_error) << '\n';
        worst = std::max(worst, r.max_rel_error);
      }
      std::cout << "worst " << format_double(worst) << (worst <= 2e-3 ? " ok" : " FAIL") << '\n';
      if (worst > 2e-3) return 1;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.kind()) << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
