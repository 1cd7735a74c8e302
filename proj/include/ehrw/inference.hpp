#pragma once

#include <cstdint>
#include <vector>

#include "ehrw/catalog.hpp"
#include "ehrw/ehr.hpp"
#include "ehrw/metrics.hpp"
#include "ehrw/predictor.hpp"
#include "ehrw/rewriter.hpp"

namespace ehrw {

struct InferenceConfig {
  double alpha = 0.0;  // weight on the rewrite probability
  int n_rewrites = 8;
  std::uint64_t seed = 0;

  void validate() const;
};

// alpha-weighted mix of the predictor's probabilities on the rewrite and
// the original text.
double interpolated_proba(const PredictorModel& predictor, const std::string& original_text,
                          const std::string& rewrite_text, double alpha);

// Ensemble inference: sample n_rewrites candidates, weight them by the
// policy's generation distribution (temperature 1), and mix with the
// original as alpha * sum_j delta_j p(rewrite_j) + (1-alpha) * p(original).
// At alpha = 0 the result is exactly the original-text probability.
double ensemble_predict(const PredictorModel& predictor, const RewriterPolicy& policy,
                        const PatientEHR& ehr, const FeatureCatalog& catalog,
                        const InferenceConfig& config);

// Batch kernel over patients (OpenMP; per-patient derived seeds) and its
// serial reference.
std::vector<double> ensemble_predict_batch(const PredictorModel& predictor,
                                           const RewriterPolicy& policy,
                                           const std::vector<PatientEHR>& patients,
                                           const FeatureCatalog& catalog,
                                           const InferenceConfig& config);
std::vector<double> ensemble_predict_batch_serial(const PredictorModel& predictor,
                                                  const RewriterPolicy& policy,
                                                  const std::vector<PatientEHR>& patients,
                                                  const FeatureCatalog& catalog,
                                                  const InferenceConfig& config);

}  // namespace ehrw
