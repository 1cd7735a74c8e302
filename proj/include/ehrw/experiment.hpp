#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ehrw/alignment.hpp"
#include "ehrw/inference.hpp"
#include "ehrw/metrics.hpp"
#include "ehrw/pipeline.hpp"
#include "ehrw/synth.hpp"

namespace ehrw {

// Ablations are stage omissions: NoDrw swaps the scored pseudo-label set
// for untrained-policy samples, NoRewriter skips MLE fine-tuning, NoKl
// skips KL alignment. OriginalsOnly is the no-rewrite baseline (train on
// originals, evaluate at alpha = 0).
enum class AblationMode { Full, NoDrw, NoRewriter, NoKl, OriginalsOnly };

const char* mode_name(AblationMode mode);
AblationMode mode_from_name(const std::string& name);

struct ExperimentConfig {
  std::string task_id = "mor";
  std::vector<std::string> pseudo_tasks;  // tasks pooled into D_Rw; default {task_id}

  OperatorConfig op_config;
  double scorer_fraction = 0.2;
  double k_percent = 25.0;
  int policy_rewrites_per_patient = 3;
  int no_drw_samples = 4;  // untrained-policy rewrites per EHR in NoDrw mode

  TrainConfig predictor_train;  // shared by scorer and predictor
  std::uint32_t hash_dim = 1u << 16;
  int hidden_units = 16;

  MleConfig mle;
  AlignmentConfig align;

  std::optional<double> alpha;  // empty = validation sweep
  int n_rewrites = 8;
  double inoculate_lr_scale = 0.1;
  std::size_t inoculate_max = 512;

  int n_bootstrap = 1000;
  std::vector<std::size_t> bucket_edges = {2048, 4096};
  double train_frac = 0.8;
  double val_frac = 0.1;
  std::uint64_t seed = 0;

  std::vector<std::string> effective_pseudo_tasks() const {
    return pseudo_tasks.empty() ? std::vector<std::string>{task_id} : pseudo_tasks;
  }
};

// Per-stage seed stream; CLI stages and the in-memory runner share it so a
// staged run reproduces run_experiment exactly.
std::uint64_t stage_seed(const ExperimentConfig& config, std::string_view tag);

inline const std::vector<double>& alpha_grid() {
  static const std::vector<double> grid{0.0, 0.25, 0.5, 0.75, 1.0};
  return grid;
}
inline const std::vector<double>& lambda_grid() {
  static const std::vector<double> grid{0.0, 0.25, 0.5, 0.75};
  return grid;
}

// Scores `ids` with ensemble inference and reports bootstrap metrics plus
// token-length strata (lengths measured on the original task-view texts).
MetricReport evaluate_ids(const PredictorModel& predictor, const RewriterPolicy& policy,
                          const TaskView& view, const std::vector<std::uint32_t>& ids,
                          const FeatureCatalog& catalog, const InferenceConfig& infer,
                          int n_bootstrap, const std::vector<std::size_t>& bucket_edges,
                          std::uint64_t eval_seed);

// Picks the alpha from the grid with the best validation AUROC (ties take
// the smaller alpha).
double sweep_alpha_on_validation(const PredictorModel& predictor, const RewriterPolicy& policy,
                                 const TaskView& view, const std::vector<std::uint32_t>& val_ids,
                                 const FeatureCatalog& catalog, int n_rewrites,
                                 std::uint64_t seed);

struct ExperimentArtifacts {
  AblationMode mode = AblationMode::Full;
  Split split;
  std::map<std::string, CandidateRewriteSet> rewrites;  // per pseudo task
  std::map<std::string, PredictorModel> scorers;
  PseudoLabelDataset drw;
  RewriterPolicy policy_init, policy_mle, policy_final;
  PredictorModel predictor, predictor_final;
  std::vector<KlTrainLogRow> train_log;
  double alpha_used = 0.0;
  MetricReport report;
};

// The full staged pipeline in memory; each stage is skipped or swapped
// according to `mode`.
ExperimentArtifacts run_experiment(const Cohort& cohort, const FeatureCatalog& catalog,
                                   AblationMode mode, const ExperimentConfig& config);

// Convenience wrapper returning just the metric report.
MetricReport ablation_run(AblationMode mode, const Cohort& cohort, const FeatureCatalog& catalog,
                          const ExperimentConfig& config);

}  // namespace ehrw
