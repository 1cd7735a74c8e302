#include "ehrw/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ehrw/inference.hpp"
#include "ehrw/rng.hpp"

namespace ehrw {

void AlignmentConfig::validate() const {
  if (!(tau > 0)) throw ConfigError("tau must be > 0");
  if (!(kappa > 0)) throw ConfigError("kappa must be > 0");
  if (!(lambda_mix >= 0.0 && lambda_mix <= 1.0)) throw ConfigError("lambda_mix must be in [0,1]");
  if (n_i < 1) throw ConfigError("n_i must be >= 1");
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
  if (batch_size < 0) throw ConfigError("batch_size must be >= 0");
}

namespace {

std::vector<double> softmax(std::vector<double> logits) {
  const double max_logit = *std::max_element(logits.begin(), logits.end());
  double norm = 0.0;
  for (auto& x : logits) {
    x = std::exp(x - max_logit);
    norm += x;
  }
  for (auto& x : logits) x /= norm;
  return logits;
}

}  // namespace

std::vector<double> csc_distribution(const PredictorModel& predictor,
                                     const std::vector<std::string>& candidate_texts,
                                     int true_label, double tau) {
  if (candidate_texts.empty()) throw PreconditionError("csc_distribution: no candidates");
  if (!(tau > 0)) throw PreconditionError("csc_distribution: tau must be > 0");
  std::vector<double> logits(candidate_texts.size());
  for (std::size_t j = 0; j < candidate_texts.size(); ++j) {
    const double p1 = predictor.predict_proba(candidate_texts[j]);
    logits[j] = (true_label == 1 ? p1 : 1.0 - p1) / tau;
  }
  return softmax(std::move(logits));
}

std::vector<double> lm_distribution(const RewriterPolicy& policy, const PatientEHR& ehr,
                                    const std::vector<Rewrite>& candidates,
                                    const FeatureCatalog& catalog, double kappa) {
  if (candidates.empty()) throw PreconditionError("lm_distribution: no candidates");
  if (!(kappa > 0)) throw PreconditionError("lm_distribution: kappa must be > 0");
  std::vector<double> logits(candidates.size());
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    logits[j] = rewrite_logprob(policy, ehr, candidates[j], catalog) / kappa;
  }
  return softmax(std::move(logits));
}

double kl_loss(std::span<const double> p_lm, std::span<const double> p_csc) {
  if (p_lm.size() != p_csc.size()) throw PreconditionError("kl_loss: length mismatch");
  double kl = 0.0;
  for (std::size_t j = 0; j < p_lm.size(); ++j) {
    if (p_lm[j] <= 0.0) continue;  // x log x -> 0
    kl += p_lm[j] * (std::log(p_lm[j]) - std::log(p_csc[j]));
  }
  return std::max(0.0, kl);
}

double total_loss(double llm_loss, double kl, double lambda_mix) {
  if (!(lambda_mix >= 0.0 && lambda_mix <= 1.0)) {
    throw PreconditionError("lambda_mix must be in [0,1]");
  }
  return lambda_mix * llm_loss + (1.0 - lambda_mix) * kl;
}

double alignment_batch_loss(const RewriterPolicy& policy,
                            const std::vector<const DualGroup*>& batch,
                            const std::vector<const PatientEHR*>& sources,
                            const std::vector<std::vector<double>>& csc_targets,
                            const FeatureCatalog& catalog, const AlignmentConfig& config,
                            PolicyGrad* grad, double* llm_out, double* kl_out) {
  if (batch.empty()) return 0.0;
  std::size_t total_candidates = 0;
  for (const auto* g : batch) total_candidates += g->candidates.size();
  const double inv_m = 1.0 / static_cast<double>(total_candidates);
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  double llm_sum = 0.0;  // sum of candidate log-likelihoods
  double kl_sum = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const DualGroup& group = *batch[b];
    const PatientEHR& ehr = *sources[b];
    const std::vector<double>& csc = csc_targets[b];

    std::vector<double> logprobs(group.candidates.size());
    for (std::size_t j = 0; j < group.candidates.size(); ++j) {
      logprobs[j] = rewrite_logprob(policy, ehr, group.candidates[j], catalog);
      llm_sum += logprobs[j];
    }
    std::vector<double> scaled = logprobs;
    for (auto& x : scaled) x /= config.kappa;
    const std::vector<double> p = softmax(std::move(scaled));

    double kl = 0.0;
    std::vector<double> gap(p.size(), 0.0);
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (p[j] <= 0.0) continue;  // saturated softmax bucket: x log x -> 0
      gap[j] = std::log(p[j]) - std::log(csc[j]);
      kl += p[j] * gap[j];
    }
    kl_sum += kl;

    if (grad) {
      for (std::size_t j = 0; j < p.size(); ++j) {
        // d/dl_j of [lambda * (-sum l / M) + (1-lambda) * mean_b KL]
        const double d_kl = p[j] * (gap[j] - kl) / config.kappa;
        const double scale =
            -config.lambda_mix * inv_m + (1.0 - config.lambda_mix) * inv_b * d_kl;
        accumulate_logprob_grad(policy, ehr, group.candidates[j], catalog, scale, *grad);
      }
    }
  }
  const double llm = -llm_sum * inv_m;
  const double kl = kl_sum * inv_b;
  if (llm_out) *llm_out = llm;
  if (kl_out) *kl_out = kl;
  return total_loss(llm, kl, config.lambda_mix);
}

KlTrainResult kl_train(const RewriterPolicy& policy, const PredictorModel& predictor,
                       const DualDataset& dual, const TaskView& view,
                       const std::vector<std::uint32_t>& val_ids, const FeatureCatalog& catalog,
                       const AlignmentConfig& config) {
  config.validate();
  KlTrainResult result;
  result.policy = policy;
  if (config.max_steps == 0 || dual.groups.empty()) return result;

  // CSC targets are fixed for the whole run: the predictor is frozen and
  // the candidate texts do not change.
  std::vector<std::vector<double>> csc_targets(dual.groups.size());
  std::vector<const PatientEHR*> sources(dual.groups.size());
  for (std::size_t g = 0; g < dual.groups.size(); ++g) {
    const DualGroup& group = dual.groups[g];
    csc_targets[g] =
        csc_distribution(predictor, group.candidate_texts, group.label, config.tau);
    sources[g] = &view.patients.at(group.patient_index);
  }

  std::vector<PatientEHR> val_patients;
  std::vector<int> val_labels;
  for (std::uint32_t id : val_ids) {
    val_patients.push_back(view.patients.at(id));
    val_labels.push_back(view.labels.at(id));
  }

  // Checkpoint selection scores the rewrites alone (alpha = 1); at alpha = 0
  // validation AUROC would not depend on the policy at all.
  InferenceConfig eval_cfg;
  eval_cfg.alpha = 1.0;
  eval_cfg.n_rewrites = config.n_i;
  eval_cfg.seed = derive_seed(config.rng_seed, "kl_eval");

  auto evaluate = [&]() -> std::optional<double> {
    if (val_patients.empty()) return std::nullopt;
    const std::vector<double> scores =
        ensemble_predict_batch(predictor, result.policy, val_patients, catalog, eval_cfg);
    try {
      return auroc(scores, val_labels);
    } catch (const DegenerateLabelsError&) {
      return std::nullopt;
    }
  };

  RewriterPolicy current = policy;
  RewriterPolicy best = policy;
  double best_auroc = -1.0;

  const std::size_t n_groups = dual.groups.size();
  const std::size_t batch_size =
      config.batch_size > 0 ? std::min<std::size_t>(config.batch_size, n_groups) : n_groups;
  std::vector<std::size_t> order(n_groups);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = 0;
  std::size_t pass = 0;
  Rng rng(derive_seed(config.rng_seed, "kl_order", pass));
  std::shuffle(order.begin(), order.end(), rng);

  for (int step = 0; step < config.max_steps; ++step) {
    if (cursor + batch_size > n_groups) {
      cursor = 0;
      ++pass;
      Rng pass_rng(derive_seed(config.rng_seed, "kl_order", pass));
      std::shuffle(order.begin(), order.end(), pass_rng);
    }
    std::vector<const DualGroup*> batch;
    std::vector<const PatientEHR*> batch_sources;
    std::vector<std::vector<double>> batch_csc;
    for (std::size_t i = 0; i < batch_size; ++i) {
      const std::size_t g = order[cursor + i];
      batch.push_back(&dual.groups[g]);
      batch_sources.push_back(sources[g]);
      batch_csc.push_back(csc_targets[g]);
    }
    cursor += batch_size;

    PolicyGrad grad;
    double llm_part = 0.0, kl_part = 0.0;
    const double loss = alignment_batch_loss(current, batch, batch_sources, batch_csc, catalog,
                                             config, &grad, &llm_part, &kl_part);
    if (!std::isfinite(loss)) {
      throw NonFiniteLossError("kl_train loss diverged at step " + std::to_string(step));
    }

    // Descent step on theta only; the predictor stays frozen.
    for (const auto& [f, g] : grad.d_feature) {
      current.feature_logits[f] -= config.learning_rate * g;
    }
    current.w_recency -= config.learning_rate * grad.d_recency;
    current.w_abnormal -= config.learning_rate * grad.d_abnormal;
    for (int k = 0; k < kNumModalities; ++k) {
      current.w_modality[k] -= config.learning_rate * grad.d_modality[k];
    }
    if (!current.params_finite()) {
      throw NonFiniteLossError("kl_train parameters diverged at step " + std::to_string(step));
    }

    KlTrainLogRow row;
    row.step = step + 1;
    row.llm_loss = llm_part;
    row.kl_loss = kl_part;
    row.total_loss = loss;

    const bool at_eval = (step + 1) % config.eval_every == 0 || step + 1 == config.max_steps;
    if (at_eval) {
      result.policy = current;
      row.val_auroc = evaluate();
      if (row.val_auroc && *row.val_auroc > best_auroc) {
        best_auroc = *row.val_auroc;
        best = current;
      }
    }
    result.log.push_back(std::move(row));
  }

  result.policy = best_auroc >= 0.0 ? best : current;
  result.best_val_auroc = best_auroc >= 0.0 ? best_auroc : 0.0;
  return result;
}

}  // namespace ehrw
