#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "ehrw/parallel.hpp"
#include "ehrw/stages.hpp"

namespace {

int error_exit_code(const std::exception& e) {
  if (dynamic_cast<const ehrw::ConfigError*>(&e)) return 2;
  if (dynamic_cast<const ehrw::MissingArtifactError*>(&e)) return 3;
  if (dynamic_cast<const ehrw::ParseError*>(&e) || dynamic_cast<const ehrw::SchemaError*>(&e)) {
    return 4;
  }
  if (dynamic_cast<const ehrw::DegenerateLabelsError*>(&e)) return 5;
  if (dynamic_cast<const ehrw::NonFiniteLossError*>(&e)) return 6;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EHR rewrite-and-predict pipeline"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the stage name

  std::string config_path, workdir, task, mode, sweep_variant;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha, lambda;
  int threads = 0;

  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--workdir", workdir, "working directory for artifacts");
  app.add_option("--seed", seed, "global seed override");
  app.add_option("--task", task, "target task (mor, ra, los, custom)");
  app.add_option("--mode", mode, "ablation mode (full, no_drw, no_rewriter, no_kl)");
  app.add_option("--alpha", alpha, "inference interpolation weight in [0,1]");
  app.add_option("--lambda", lambda, "loss mix weight in [0,1]");
  app.add_option("--sweep", sweep_variant, "sweep variable (alpha or lambda)");
  app.add_option("--threads", threads, "worker thread cap (0 = default)");

  for (const auto& stage : ehrw::kStageNames) {
    app.add_subcommand(stage, "run the " + stage + " stage");
  }
  app.add_subcommand("all", "run every stage in order (except sweep)");

  CLI11_PARSE(app, argc, argv);
  const std::string stage = app.get_subcommands().front()->get_name();

  try {
    ehrw::RunConfig cfg;
    if (!config_path.empty()) cfg = ehrw::RunConfig::from_json_file(config_path);
    if (!workdir.empty()) cfg.workdir = workdir;
    if (seed) {
      cfg.exp.seed = *seed;
      cfg.cohort_spec.seed = *seed;
    }
    if (!task.empty()) cfg.exp.task_id = task;
    if (!mode.empty()) cfg.mode = ehrw::mode_from_name(mode);
    if (alpha) cfg.exp.alpha = *alpha;
    if (lambda) cfg.exp.align.lambda_mix = *lambda;
    if (threads > 0) ehrw::set_max_threads(threads);

    if (stage == "all") {
      ehrw::run_all_stages(cfg);
    } else if (stage == "sweep") {
      ehrw::run_stage(stage, cfg,
                      sweep_variant.empty() ? std::optional<std::string>("alpha")
                                            : std::optional<std::string>(sweep_variant));
    } else {
      ehrw::run_stage(stage, cfg);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return error_exit_code(e);
  }
  return 0;
}
