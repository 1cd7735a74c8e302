#include "ehrw/inference.hpp"

#include <cmath>

#include "ehrw/alignment.hpp"
#include "ehrw/parallel.hpp"
#include "ehrw/rng.hpp"

namespace ehrw {

void InferenceConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in [0,1]");
  if (n_rewrites < 1) throw ConfigError("n_rewrites must be >= 1");
}

double interpolated_proba(const PredictorModel& predictor, const std::string& original_text,
                          const std::string& rewrite_text, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw PreconditionError("alpha must be in [0,1]");
  return alpha * predictor.predict_proba(rewrite_text) +
         (1.0 - alpha) * predictor.predict_proba(original_text);
}

namespace {

double ensemble_predict_seeded(const PredictorModel& predictor, const RewriterPolicy& policy,
                               const PatientEHR& ehr, const FeatureCatalog& catalog,
                               const InferenceConfig& config, std::uint64_t seed) {
  const double p_original = predictor.predict_proba(verbalize(ehr, catalog).text);
  if (config.alpha == 0.0) return p_original;  // convex combination of a constant

  const std::vector<Rewrite> candidates =
      sample_rewrites(policy, ehr, catalog, config.n_rewrites, seed);
  const std::vector<double> delta =
      lm_distribution(policy, ehr, candidates, catalog, /*kappa=*/1.0);

  double p_rewrites = 0.0;
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    const std::string text = verbalize(rewrite_to_ehr(ehr, candidates[j]), catalog).text;
    p_rewrites += delta[j] * predictor.predict_proba(text);
  }
  return config.alpha * p_rewrites + (1.0 - config.alpha) * p_original;
}

}  // namespace

double ensemble_predict(const PredictorModel& predictor, const RewriterPolicy& policy,
                        const PatientEHR& ehr, const FeatureCatalog& catalog,
                        const InferenceConfig& config) {
  config.validate();
  return ensemble_predict_seeded(predictor, policy, ehr, catalog, config,
                                 derive_seed(config.seed, ehr.patient_id, 3));
}

std::vector<double> ensemble_predict_batch(const PredictorModel& predictor,
                                           const RewriterPolicy& policy,
                                           const std::vector<PatientEHR>& patients,
                                           const FeatureCatalog& catalog,
                                           const InferenceConfig& config) {
  config.validate();
  std::vector<double> out(patients.size());
  parallel_for(patients.size(), [&](std::size_t i) {
    out[i] = ensemble_predict_seeded(predictor, policy, patients[i], catalog, config,
                                     derive_seed(config.seed, patients[i].patient_id, 3));
  });
  return out;
}

std::vector<double> ensemble_predict_batch_serial(const PredictorModel& predictor,
                                                  const RewriterPolicy& policy,
                                                  const std::vector<PatientEHR>& patients,
                                                  const FeatureCatalog& catalog,
                                                  const InferenceConfig& config) {
  config.validate();
  std::vector<double> out(patients.size());
  serial_for(patients.size(), [&](std::size_t i) {
    out[i] = ensemble_predict_seeded(predictor, policy, patients[i], catalog, config,
                                     derive_seed(config.seed, patients[i].patient_id, 3));
  });
  return out;
}

}  // namespace ehrw
