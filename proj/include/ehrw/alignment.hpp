#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ehrw/catalog.hpp"
#include "ehrw/pipeline.hpp"
#include "ehrw/predictor.hpp"
#include "ehrw/rewriter.hpp"

namespace ehrw {

struct AlignmentConfig {
  double tau = 0.1;        // CSC temperature
  double kappa = 0.01;     // rewriter temperature
  double lambda_mix = 0.5; // weight on the mask log-likelihood term
  int n_i = 8;
  int max_steps = 400;
  int eval_every = 100;
  double learning_rate = 0.05;
  int batch_size = 16;  // dual groups per step; 0 = full batch
  std::uint64_t rng_seed = 0;

  void validate() const;
};

// Softmax over candidates of the predictor's true-label probability / tau.
// The predictor is a constant here; no gradient flows to it.
std::vector<double> csc_distribution(const PredictorModel& predictor,
                                     const std::vector<std::string>& candidate_texts,
                                     int true_label, double tau);

// Softmax over candidates of the exact mask log-probability / kappa.
std::vector<double> lm_distribution(const RewriterPolicy& policy, const PatientEHR& ehr,
                                    const std::vector<Rewrite>& candidates,
                                    const FeatureCatalog& catalog, double kappa);

// KL(p_lm || p_csc) = sum p_lm (log p_lm - log p_csc); >= 0, 0 iff equal.
double kl_loss(std::span<const double> p_lm, std::span<const double> p_csc);

// lambda * L_LLM + (1 - lambda) * L_KL.
double total_loss(double llm_loss, double kl, double lambda_mix);

// Loss (and optionally the policy gradient) of one batch of dual groups:
// mean KL against the cached CSC targets plus lambda-weighted mean negative
// candidate log-likelihood. Exposed for gradient checks. llm_out/kl_out
// receive the two components when non-null.
double alignment_batch_loss(const RewriterPolicy& policy,
                            const std::vector<const DualGroup*>& batch,
                            const std::vector<const PatientEHR*>& sources,
                            const std::vector<std::vector<double>>& csc_targets,
                            const FeatureCatalog& catalog, const AlignmentConfig& config,
                            PolicyGrad* grad, double* llm_out = nullptr,
                            double* kl_out = nullptr);

struct KlTrainLogRow {
  int step = 0;
  double total_loss = 0.0;
  double llm_loss = 0.0;
  double kl_loss = 0.0;
  std::optional<double> val_auroc;
};

struct KlTrainResult {
  RewriterPolicy policy;  // best validation-AUROC checkpoint
  std::vector<KlTrainLogRow> log;
  double best_val_auroc = 0.0;
};

// KL training loop: per step, recompute each batch group's p_CSC (predictor
// frozen) and p_LM, and step theta on the combined objective. Every
// eval_every steps the validation AUROC of ensemble inference is recorded;
// the best checkpoint wins. Deterministic per rng_seed.
KlTrainResult kl_train(const RewriterPolicy& policy, const PredictorModel& predictor,
                       const DualDataset& dual, const TaskView& view,
                       const std::vector<std::uint32_t>& val_ids, const FeatureCatalog& catalog,
                       const AlignmentConfig& config);

}  // namespace ehrw
