#include "ehrw/experiment.hpp"

#include <algorithm>

#include "ehrw/rng.hpp"

namespace ehrw {

const char* mode_name(AblationMode mode) {
  switch (mode) {
    case AblationMode::Full: return "full";
    case AblationMode::NoDrw: return "no_drw";
    case AblationMode::NoRewriter: return "no_rewriter";
    case AblationMode::NoKl: return "no_kl";
    case AblationMode::OriginalsOnly: return "baseline";
  }
  return "?";
}

AblationMode mode_from_name(const std::string& name) {
  if (name == "full") return AblationMode::Full;
  if (name == "no_drw") return AblationMode::NoDrw;
  if (name == "no_rewriter") return AblationMode::NoRewriter;
  if (name == "no_kl") return AblationMode::NoKl;
  if (name == "baseline") return AblationMode::OriginalsOnly;
  throw ConfigError("unknown mode: " + name);
}

std::uint64_t stage_seed(const ExperimentConfig& config, std::string_view tag) {
  return derive_seed(config.seed, tag);
}

MetricReport evaluate_ids(const PredictorModel& predictor, const RewriterPolicy& policy,
                          const TaskView& view, const std::vector<std::uint32_t>& ids,
                          const FeatureCatalog& catalog, const InferenceConfig& infer,
                          int n_bootstrap, const std::vector<std::size_t>& bucket_edges,
                          std::uint64_t eval_seed) {
  std::vector<PatientEHR> patients;
  std::vector<int> labels;
  patients.reserve(ids.size());
  for (std::uint32_t id : ids) {
    patients.push_back(view.patients.at(id));
    labels.push_back(view.labels.at(id));
  }
  const std::vector<double> scores =
      ensemble_predict_batch(predictor, policy, patients, catalog, infer);

  MetricReport report = bootstrap_metrics(scores, labels, n_bootstrap, eval_seed);
  std::vector<PatientScore> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    rows[i] = {scores[i], labels[i], verbalize(patients[i], catalog).token_count};
  }
  report.strata = stratified_report(rows, bucket_edges);
  return report;
}

double sweep_alpha_on_validation(const PredictorModel& predictor, const RewriterPolicy& policy,
                                 const TaskView& view, const std::vector<std::uint32_t>& val_ids,
                                 const FeatureCatalog& catalog, int n_rewrites,
                                 std::uint64_t seed) {
  std::vector<PatientEHR> patients;
  std::vector<int> labels;
  for (std::uint32_t id : val_ids) {
    patients.push_back(view.patients.at(id));
    labels.push_back(view.labels.at(id));
  }
  double best_alpha = 0.0;
  double best_auroc = -1.0;
  for (double alpha : alpha_grid()) {
    InferenceConfig infer;
    infer.alpha = alpha;
    infer.n_rewrites = n_rewrites;
    infer.seed = seed;
    const std::vector<double> scores =
        ensemble_predict_batch(predictor, policy, patients, catalog, infer);
    double score = -1.0;
    try {
      score = auroc(scores, labels);
    } catch (const DegenerateLabelsError&) {
      continue;
    }
    if (score > best_auroc) {
      best_auroc = score;
      best_alpha = alpha;
    }
  }
  return best_alpha;
}

namespace {

std::vector<Example> original_examples(const TaskView& view,
                                       const std::vector<std::uint32_t>& ids,
                                       const FeatureCatalog& catalog) {
  std::vector<Example> out;
  out.reserve(ids.size());
  for (std::uint32_t id : ids) {
    out.emplace_back(verbalize(view.patients.at(id), catalog).text, view.labels.at(id));
  }
  return out;
}

// NoDrw: replace Algorithm-1 selection with untrained-policy samples.
PseudoLabelDataset zero_shot_pseudolabels(const std::map<std::string, TaskView>& views,
                                          const std::vector<std::uint32_t>& train_ids,
                                          const RewriterPolicy& policy_init,
                                          const FeatureCatalog& catalog, int samples_per_ehr,
                                          std::uint64_t seed) {
  PseudoLabelDataset out;
  out.k_percent = 0.0;
  for (const auto& [task, view] : views) {
    for (std::uint32_t id : train_ids) {
      const PatientEHR& source = view.patients.at(id);
      const auto samples = sample_rewrites(policy_init, source, catalog, samples_per_ehr,
                                           derive_seed(seed, source.patient_id + ":" + task, 4));
      for (const auto& rw : samples) out.entries.push_back({source, rw, task});
    }
  }
  return out;
}

}  // namespace

ExperimentArtifacts run_experiment(const Cohort& cohort, const FeatureCatalog& catalog,
                                   AblationMode mode, const ExperimentConfig& config) {
  ExperimentArtifacts art;
  art.mode = mode;
  const std::size_t n = cohort.patients.size();
  art.split = split_cohort(n, config.train_frac, config.val_frac, stage_seed(config, "split"));
  assert_no_leakage(art.split.train, art.split);

  const TaskView target_view = make_task_view(cohort, config.task_id);
  const std::vector<Example> val_originals = original_examples(target_view, art.split.val, catalog);

  art.policy_init = RewriterPolicy{};
  art.policy_init.rng_seed = stage_seed(config, "policy");

  std::map<std::string, TaskView> views;
  if (mode != AblationMode::OriginalsOnly) {
    for (const auto& task : config.effective_pseudo_tasks()) {
      views.emplace(task, task == config.task_id ? target_view : make_task_view(cohort, task));
    }
    if (!views.count(config.task_id)) views.emplace(config.task_id, target_view);

    // Stage: candidate rewrites + scorers per pseudo task.
    for (const auto& task : config.effective_pseudo_tasks()) {
      OperatorConfig op_cfg = config.op_config;
      op_cfg.rng_seed = stage_seed(config, "ops:" + task);
      art.rewrites[task] =
          build_candidate_rewrites(views.at(task), art.split.train, catalog, op_cfg);

      TrainConfig scorer_cfg = config.predictor_train;
      scorer_cfg.rng_seed = stage_seed(config, "scorer:" + task);
      const std::vector<Example> subset =
          build_scorer_subset(views.at(task), art.rewrites.at(task), catalog,
                              config.scorer_fraction, scorer_cfg.rng_seed);
      const std::vector<Example> scorer_val =
          task == config.task_id ? val_originals
                                 : original_examples(views.at(task), art.split.val, catalog);
      art.scorers.emplace(task, train(subset, scorer_cfg, scorer_val, config.hash_dim,
                                      config.hidden_units));
    }

    // Stage: pseudo-label selection (or its zero-shot replacement).
    if (mode == AblationMode::NoDrw) {
      art.drw = zero_shot_pseudolabels(views, art.split.train, art.policy_init, catalog,
                                       config.no_drw_samples, stage_seed(config, "drw"));
    } else {
      std::map<std::string, const CandidateRewriteSet*> rw_ptrs;
      std::map<std::string, const TaskView*> view_ptrs;
      std::map<std::string, const PredictorModel*> scorer_ptrs;
      for (const auto& task : config.effective_pseudo_tasks()) {
        rw_ptrs[task] = &art.rewrites.at(task);
        view_ptrs[task] = &views.at(task);
        scorer_ptrs[task] = &art.scorers.at(task);
      }
      art.drw = select_pseudolabels(rw_ptrs, view_ptrs, scorer_ptrs, catalog, config.k_percent);
    }

    // Stage: rewriter MLE fine-tuning.
    if (mode == AblationMode::NoRewriter) {
      art.policy_mle = art.policy_init;
    } else {
      MleConfig mle_cfg = config.mle;
      mle_cfg.rng_seed = stage_seed(config, "mle");
      art.policy_mle = mle_finetune(art.policy_init, art.drw.mask_pairs(), catalog, mle_cfg);
    }
  } else {
    art.policy_mle = art.policy_init;
  }

  // Stage: predictor training.
  TrainConfig pred_cfg = config.predictor_train;
  pred_cfg.rng_seed = stage_seed(config, "predictor");
  if (mode == AblationMode::OriginalsOnly) {
    art.predictor = train(original_examples(target_view, art.split.train, catalog), pred_cfg,
                          val_originals, config.hash_dim, config.hidden_units);
  } else {
    const AugmentedDataset augmented = build_augmented(
        target_view, art.split.train, art.rewrites.at(config.task_id), art.policy_mle,
        config.policy_rewrites_per_patient, catalog, stage_seed(config, "augment"));
    art.predictor =
        train(augmented.examples(), pred_cfg, val_originals, config.hash_dim, config.hidden_units);
  }

  // Stage: KL alignment.
  if (mode == AblationMode::OriginalsOnly || mode == AblationMode::NoKl) {
    art.policy_final = art.policy_mle;
  } else {
    const DualDataset dual = build_dual(target_view, art.split.train, art.policy_mle,
                                        config.align.n_i, catalog, stage_seed(config, "dual"));
    AlignmentConfig align_cfg = config.align;
    align_cfg.rng_seed = stage_seed(config, "kl");
    KlTrainResult kl = kl_train(art.policy_mle, art.predictor, dual, target_view, art.split.val,
                                catalog, align_cfg);
    art.policy_final = std::move(kl.policy);
    art.train_log = std::move(kl.log);
  }

  // Stage: predictor inoculation on final-policy samples.
  if (mode == AblationMode::OriginalsOnly) {
    art.predictor_final = art.predictor;
  } else {
    std::vector<Example> inoc;
    std::vector<std::uint32_t> sorted_ids = art.split.train;
    std::sort(sorted_ids.begin(), sorted_ids.end(), [&](std::uint32_t a, std::uint32_t b) {
      return target_view.patients.at(a).patient_id < target_view.patients.at(b).patient_id;
    });
    const std::uint64_t inoc_seed = stage_seed(config, "inoculate");
    for (std::uint32_t id : sorted_ids) {
      const PatientEHR& source = target_view.patients.at(id);
      const auto samples =
          sample_rewrites(art.policy_final, source, catalog, 1,
                          derive_seed(inoc_seed, source.patient_id, 5));
      inoc.emplace_back(verbalize(rewrite_to_ehr(source, samples.front()), catalog).text,
                        target_view.labels.at(id));
    }
    TrainConfig inoc_cfg = config.predictor_train;
    inoc_cfg.rng_seed = inoc_seed;
    art.predictor_final =
        inoculate(art.predictor, inoc, inoc_cfg, config.inoculate_lr_scale, config.inoculate_max);
  }

  // Stage: evaluation (alpha from config or validation sweep).
  if (mode == AblationMode::OriginalsOnly) {
    art.alpha_used = 0.0;
  } else if (config.alpha) {
    art.alpha_used = *config.alpha;
  } else {
    art.alpha_used = sweep_alpha_on_validation(art.predictor_final, art.policy_final, target_view,
                                               art.split.val, catalog, config.n_rewrites,
                                               stage_seed(config, "alpha_sweep"));
  }
  InferenceConfig infer;
  infer.alpha = art.alpha_used;
  infer.n_rewrites = config.n_rewrites;
  infer.seed = stage_seed(config, "eval");
  art.report = evaluate_ids(art.predictor_final, art.policy_final, target_view, art.split.test,
                            catalog, infer, config.n_bootstrap, config.bucket_edges,
                            stage_seed(config, "bootstrap"));
  return art;
}

MetricReport ablation_run(AblationMode mode, const Cohort& cohort, const FeatureCatalog& catalog,
                          const ExperimentConfig& config) {
  return run_experiment(cohort, catalog, mode, config).report;
}

}  // namespace ehrw
