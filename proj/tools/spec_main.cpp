#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "spec/experiments.hpp"

// Exit codes: 0 success, 1 configuration error (bad flags, missing or invalid
// config), 2 runtime failure.

namespace {

struct GlobalArgs {
  std::string config_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool seed_set = false;
  int threads = -1;
};

spec::ExperimentConfig load_with_overrides(const GlobalArgs& g) {
  if (g.config_path.empty()) throw std::invalid_argument("--config <path> is required");
  spec::ExperimentConfig cfg = spec::load_experiment_config(g.config_path);
  if (g.seed_set) cfg.seed = g.seed;
  if (!g.out_dir.empty()) cfg.out_dir = g.out_dir;
  if (g.threads >= 0) cfg.threads = g.threads;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spec: spectroscopy quantification with physics-checked correction"};
  app.fallthrough();
  app.require_subcommand(1);

  GlobalArgs g;
  app.add_option("--config", g.config_path, "experiment config JSON");
  auto* seed_opt = app.add_option("--seed", g.seed, "master seed override");
  app.add_option("--out", g.out_dir, "output directory override");
  app.add_option("--threads", g.threads, "worker threads (SPEC_THREADS env wins)");

  auto* cmd_gen_lines = app.add_subcommand("gen-lines", "generate and write a line database");
  auto* cmd_gen_data = app.add_subcommand("gen-data", "generate and write the dataset CSV");
  auto* cmd_train = app.add_subcommand("train-estimator", "train the estimator and save a checkpoint");
  auto* cmd_eval = app.add_subcommand("eval-estimator", "evaluate the estimator on val/test splits");
  auto* cmd_run = app.add_subcommand("run", "run the experiment described by the config");
  auto* cmd_ablate = app.add_subcommand("ablate", "run the configured ablation arms");
  auto* cmd_report = app.add_subcommand("report", "aggregate case CSVs under --out into report.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  g.seed_set = seed_opt->count() > 0;

  try {
    if (cmd_report->parsed()) {
      const std::string dir = !g.out_dir.empty()
                                  ? g.out_dir
                                  : (!g.config_path.empty()
                                         ? spec::load_experiment_config(g.config_path).out_dir
                                         : std::string());
      if (dir.empty()) throw std::invalid_argument("report: need --out <dir> or --config");
      std::cout << spec::aggregate_reports(dir).dump(2) << "\n";
      return 0;
    }

    const spec::ExperimentConfig cfg = load_with_overrides(g);
    spec::ojson result;
    if (cmd_gen_lines->parsed()) {
      const spec::LineDatabase db = spec::generate_lines_from_config(cfg);
      result["lines"] = db.lines.size();
      result["scale_kappa"] = db.scale_kappa;
    } else if (cmd_gen_data->parsed()) {
      result = spec::generate_data_from_config(cfg);
    } else if (cmd_train->parsed()) {
      result = spec::train_estimator_from_config(cfg);
    } else if (cmd_eval->parsed()) {
      result = spec::eval_estimator_from_config(cfg);
    } else if (cmd_ablate->parsed()) {
      result = spec::run_ablation(cfg);
    } else if (cmd_run->parsed()) {
      result = spec::run_experiment(cfg);
    }
    std::cout << result.dump(2) << "\n";
    return 0;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
