#include "lmrl/experiment.hpp"

#include <algorithm>
#include <fstream>

#include "lmrl/error.hpp"
#include "lmrl/format.hpp"

namespace lmrl {

const std::vector<std::string>& recipe_names() {
  static const std::vector<std::string> names{"dt-baseline", "transfer", "ablation", "freeze", "context", "model-size"};
  return names;
}

namespace {

FinetuneConfig baseline(FinetuneConfig c) {
  c.init = InitMode::random;
  c.loss.lambda1 = 0.0f;
  c.loss.lambda2 = 0.0f;
  c.random_positions = false;
  c.frozen = false;
  return c;
}

FinetuneConfig pretrained(FinetuneConfig c) {
  c.init = InitMode::pretrained;
  return c;
}

}  // namespace

std::string size_label(const TransformerConfig& config) {
  return "d" + std::to_string(config.model_dim) + "-l" + std::to_string(config.num_layers) + "-h" +
         std::to_string(config.num_heads);
}

std::vector<Variant> recipe_variants(const ExperimentSpec& spec, const std::vector<std::string>& pretrained_sizes) {
  const auto& r = spec.recipe;
  const FinetuneConfig& b = spec.base;
  std::vector<Variant> v;
  if (r == "dt-baseline") {
    v.push_back({"dt", baseline(b)});
  } else if (r == "transfer") {
    v.push_back({"pretrained", pretrained(b)});
    auto rnd = baseline(b);
    rnd.size = b.size;
    v.push_back({"random", rnd});
  } else if (r == "ablation") {
    v.push_back({"full", pretrained(b)});
    auto no_cos = pretrained(b);
    no_cos.loss.lambda1 = 0.0f;
    v.push_back({"no-lcos", no_cos});
    auto no_lm = pretrained(b);
    no_lm.loss.lambda2 = 0.0f;
    v.push_back({"no-llm", no_lm});
    auto rpos = pretrained(b);
    rpos.random_positions = true;
    v.push_back({"random-pos", rpos});
  } else if (r == "freeze") {
    auto ft = pretrained(b);
    ft.frozen = false;
    v.push_back({"finetuned", ft});
    auto fr = pretrained(b);
    fr.frozen = true;
    v.push_back({"frozen", fr});
  } else if (r == "context") {
    for (int k : spec.contexts) {
      auto p = pretrained(b);
      p.context = k;
      v.push_back({"pretrained-k" + std::to_string(k), p});
      auto rnd = baseline(b);
      rnd.context = k;
      v.push_back({"random-k" + std::to_string(k), rnd});
    }
  } else if (r == "model-size") {
    for (const auto& s : spec.sizes) {
      auto rnd = baseline(b);
      rnd.size = s;
      v.push_back({"random-" + s, rnd});
    }
    for (std::size_t i = 0; i < pretrained_sizes.size(); ++i) {
      v.push_back({"pretrained-" + pretrained_sizes[i], pretrained(b), static_cast<int>(i)});
    }
  } else {
    std::string known;
    for (const auto& n : recipe_names()) known += (known.empty() ? "" : ", ") + n;
    fail(ErrorKind::config, "unknown recipe '" + r + "' (known: " + known + ")");
  }
  return v;
}

ExperimentResult run_experiment(const ExperimentSpec& spec, const ExperimentInputs& inputs,
                                const ExperimentObserver& observer) {
  if (!inputs.dataset) fail(ErrorKind::contract, "experiment needs a dataset");
  if (spec.seeds.empty()) fail(ErrorKind::config, "experiment needs at least one seed");
  std::vector<std::string> labels;
  for (const auto* lm : inputs.language_models) {
    if (!lm) fail(ErrorKind::io, "missing language-model checkpoint");
    labels.push_back(size_label(lm->config));
  }
  const auto variants = recipe_variants(spec, labels);
  for (const auto& v : variants) {
    if (v.config.init == InitMode::pretrained && inputs.language_models.empty()) {
      fail(ErrorKind::io, "variant '" + v.name + "' needs a language-model checkpoint");
    }
    v.config.validate();
  }

  ExperimentResult result;
  result.recipe = spec.recipe;
  for (const auto& v : variants) {
    EvalReport report;
    report.variant = v.name;
    report.environment = inputs.dataset->manifest.environment;
    report.tier = inputs.dataset->manifest.tier;
    std::vector<std::vector<TrainMetric>> metrics;
    for (const auto seed : spec.seeds) {
      FinetuneConfig cfg = v.config;
      cfg.seed = seed;
      FinetuneInputs fin;
      fin.dataset = inputs.dataset;
      fin.corpus = inputs.corpus;
      if (cfg.init == InitMode::pretrained) fin.language_model = inputs.language_models[static_cast<std::size_t>(v.language_model)];
      auto run = finetune(cfg, fin);
      report.runs.push_back(run.report);
      metrics.push_back(std::move(run.metrics));
      if (observer) observer(v.name, report.runs.back());
    }
    result.reports.push_back(std::move(report));
    result.metrics.push_back(std::move(metrics));
  }
  return result;
}

void write_comparison_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::io, "cannot write " + path.string());
  std::size_t seeds = 0;
  for (const auto& r : reports) seeds = std::max(seeds, r.runs.size());
  os << "variant";
  for (std::size_t i = 0; i < seeds; ++i) os << ",seed_" << i;
  os << ",median,ci_low,ci_high,median_convergence_step\n";
  for (const auto& r : reports) {
    std::vector<double> best;
    for (const auto& run : r.runs) best.push_back(run.best_score);
    os << r.variant;
    for (std::size_t i = 0; i < seeds; ++i) os << ',' << (i < best.size() ? format_double(best[i]) : "");
    const auto ci = best.size() > 1 ? bootstrap_ci(best) : ConfidenceInterval{best[0], best[0]};
    os << ',' << format_double(median(best)) << ',' << format_double(ci.low) << ',' << format_double(ci.high) << ','
       << format_double(r.median_convergence_step()) << '\n';
  }
}

void write_runs_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::io, "cannot write " + path.string());
  os << "variant,seed,step,normalized_mean,normalized_std\n";
  for (const auto& r : reports) {
    for (const auto& run : r.runs) {
      for (const auto& p : run.evaluations) {
        os << r.variant << ',' << run.seed << ',' << p.step << ',' << format_double(p.normalized_mean) << ','
           << format_double(p.normalized_std) << '\n';
      }
    }
  }
}

std::vector<std::filesystem::path> write_experiment(const ExperimentResult& result, const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> paths;
  for (std::size_t v = 0; v < result.reports.size(); ++v) {
    const auto& report = result.reports[v];
    paths.push_back(dir / (report.variant + ".json"));
    write_eval_report(paths.back(), report);
    for (std::size_t s = 0; s < report.runs.size(); ++s) {
      const auto run_dir = dir / report.variant / ("seed" + std::to_string(report.runs[s].seed));
      paths.push_back(run_dir / "metrics.csv");
      write_train_metrics(paths.back(), result.metrics[v][s]);
      paths.push_back(run_dir / "curve.csv");
      write_eval_curve(paths.back(), report.runs[s].evaluations);
    }
  }
  paths.push_back(dir / "comparison.csv");
  write_comparison_csv(paths.back(), result.reports);
  paths.push_back(dir / "runs.csv");
  write_runs_csv(paths.back(), result.reports);
  return paths;
}

}  // namespace lmrl
