#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ehrw/catalog.hpp"
#include "ehrw/ehr.hpp"
#include "ehrw/rewrite.hpp"

namespace ehrw {

// Per-tuple context features feeding the inclusion logit.
struct TupleContext {
  double recency = 0.0;   // t / T_max, 0 when T_max == 0
  double abnormal = 0.0;  // 1 when the value falls outside the catalog range
  Modality modality = Modality::Other;
};

TupleContext tuple_context(const PatientEHR& ehr, std::size_t tuple_index,
                           const FeatureCatalog& catalog);

// Generative rewrite model: each tuple is kept independently with
// probability sigmoid(feature_logit + context weights . context), which
// makes every rewrite's generation probability exact.
struct RewriterPolicy {
  std::map<FeatureId, double> feature_logits;  // absent feature => logit 0
  double w_recency = 0.0;
  double w_abnormal = 0.0;
  std::array<double, kNumModalities> w_modality{};
  std::uint64_t rng_seed = 0;

  double feature_logit(const FeatureId& f) const {
    auto it = feature_logits.find(f);
    return it == feature_logits.end() ? 0.0 : it->second;
  }

  // Flat parameter order: w_recency, w_abnormal, w_modality[0..5], then
  // feature logits in map order. Used by training and gradient checks.
  std::vector<double> flat_params() const;
  void set_flat_params(std::span<const double> params);
  bool params_finite() const;

  void save(const std::string& path) const;
  static RewriterPolicy load(const std::string& path);
};

double tuple_logit(const RewriterPolicy& policy, const PatientEHR& ehr, std::size_t tuple_index,
                   const FeatureCatalog& catalog);
double tuple_q(const RewriterPolicy& policy, const PatientEHR& ehr, std::size_t tuple_index,
               const FeatureCatalog& catalog);

// Exact mask log-probability of `rewrite` under the policy: the sum over
// all source tuples of the kept/dropped Bernoulli log terms. Always <= 0;
// 0 for the empty record. Throws NotASubsetError for foreign tuples.
double rewrite_logprob(const RewriterPolicy& policy, const PatientEHR& ehr,
                       const Rewrite& rewrite, const FeatureCatalog& catalog);

// Draws n independent masks with recorded exact log-probabilities. An
// all-dropped draw is retried up to 8 times, then the highest-q tuple is
// forced in, so non-empty records never yield empty rewrites.
std::vector<Rewrite> sample_rewrites(const RewriterPolicy& policy, const PatientEHR& ehr,
                                     const FeatureCatalog& catalog, int n, std::uint64_t seed);

// Gradient of a mask log-probability with respect to the policy parameters.
struct PolicyGrad {
  std::map<FeatureId, double> d_feature;
  double d_recency = 0.0;
  double d_abnormal = 0.0;
  std::array<double, kNumModalities> d_modality{};

  void axpy(double scale, const PolicyGrad& other);
  std::vector<double> flat(const RewriterPolicy& reference) const;
};

void accumulate_logprob_grad(const RewriterPolicy& policy, const PatientEHR& ehr,
                             const Rewrite& rewrite, const FeatureCatalog& catalog, double scale,
                             PolicyGrad& grad);

struct RewritePair {
  PatientEHR ehr;
  Rewrite rewrite;
};

struct MleConfig {
  double learning_rate = 0.5;
  int epochs = 50;
  int batch_size = 0;  // 0 = full batch
  std::uint64_t rng_seed = 0;
};

// Maximum-likelihood fine-tuning: gradient ascent on the mean mask
// log-likelihood of the pseudo-label pairs. Materializes a logit entry for
// every feature seen in the data. Empty input returns the policy unchanged.
RewriterPolicy mle_finetune(const RewriterPolicy& policy, const std::vector<RewritePair>& pairs,
                            const FeatureCatalog& catalog, const MleConfig& config);

// Mean negative mask log-likelihood of `pairs` (the rewriter training loss).
double mask_nll(const RewriterPolicy& policy, const std::vector<RewritePair>& pairs,
                const FeatureCatalog& catalog);

// ---------------------------------------------------------------------------
// Optional bridge to an external text-generation service.

struct EndpointConfig {
  std::string host;  // e.g. "127.0.0.1"
  int port = 0;
  std::string path = "/generate";
  std::string auth_token;  // sent as a bearer token when non-empty
  int timeout_sec = 10;
};

struct GeneratedText {
  std::string text;
  std::optional<double> logprob;
};

// POSTs {prompt, n, want_logprobs} and expects {texts: [...], logprobs?}.
// Throws EndpointUnavailableError / MalformedResponseError.
std::vector<GeneratedText> external_generate(const EndpointConfig& endpoint,
                                             const std::string& prompt_text, int n);

// Ensemble weights for generated texts: softmax of log-probabilities, or
// uniform when any log-probability is missing.
std::vector<double> generation_weights(const std::vector<GeneratedText>& generations);

}  // namespace ehrw
