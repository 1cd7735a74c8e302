#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ehrw/catalog.hpp"
#include "ehrw/ehr.hpp"
#include "ehrw/rewrite.hpp"

namespace ehrw {

// The eight paraphrase operators. Exactly these; serialization names are
// operator_name() below.
enum class OperatorId : int {
  Temporal = 0,
  Abnormal = 1,
  Mi = 2,
  Mrmr = 3,
  Rfe = 4,
  RandFeature = 5,
  RandTuple = 6,
  Identity = 7,
};
constexpr int kNumOperators = 8;

const char* operator_name(OperatorId op);
OperatorId operator_from_name(const std::string& name);
inline bool is_data_driven(OperatorId op) {
  return op == OperatorId::Mi || op == OperatorId::Mrmr || op == OperatorId::Rfe;
}

struct OperatorConfig {
  double x_percent = 0.3;        // selection fraction x
  int top_fill = 10;             // always include the globally top-N scored features
  int mi_bins = 10;
  double rfe_step_fraction = 0.1;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

struct FeatureScoreTable {
  std::map<FeatureId, double> scores;
  OperatorId method = OperatorId::Mi;
};

// ---------------------------------------------------------------------------
// Patient-level feature aggregation. A patient's value for a feature is its
// last recorded non-missing value (numeric) or the mode (categorical);
// patients lacking the feature fall into a dedicated absent category.

// Per-patient category codes for one feature. Codes are 0..n_codes-1 and
// the absent category is code n_codes-1 when any patient lacks the feature.
struct BinnedFeature {
  std::vector<int> codes;  // one per patient
  int n_codes = 0;
  bool all_absent = false;
};

BinnedFeature bin_feature(const std::vector<PatientEHR>& patients, const FeatureId& feature,
                          const CatalogEntry& entry, int mi_bins);

// Plug-in mutual information in nats between two category vectors.
double plugin_mi(const std::vector<int>& x, const std::vector<int>& y);
// Plug-in entropy in nats of one category vector.
double plugin_entropy(const std::vector<int>& x);

// Sorted union of features present in at least one patient.
std::vector<FeatureId> features_present(const std::vector<PatientEHR>& patients);

// ---------------------------------------------------------------------------
// Scorers and rankers. All take (patients, labels) parallel arrays; callers
// restrict them to the training split.

FeatureScoreTable mutual_information_scores(const std::vector<PatientEHR>& patients,
                                            const std::vector<int>& labels,
                                            const FeatureCatalog& catalog,
                                            const OperatorConfig& config);

// Greedy MID ranking: first pick maximizes relevance MI(f; label); each
// later pick maximizes relevance minus mean MI against already-selected
// features. Ties break on FeatureId order. Returns a full ranking.
std::vector<FeatureId> mrmr_rank(const std::vector<PatientEHR>& patients,
                                 const std::vector<int>& labels, const FeatureCatalog& catalog,
                                 const OperatorConfig& config);

// Recursive feature elimination over the in-repo dense logistic model:
// repeat { fit; drop the ceil(step * remaining) smallest |coefficient|
// features }. Ranking is reverse elimination order.
std::vector<FeatureId> rfe_rank(const std::vector<PatientEHR>& patients,
                                const std::vector<int>& labels, const FeatureCatalog& catalog,
                                const OperatorConfig& config);

// Converts a ranking into a score table (score = n - position) so rank-based
// methods plug into the same top-x selection as MI.
FeatureScoreTable ranking_to_table(const std::vector<FeatureId>& ranking, OperatorId method);

// Threshold for keeping the top `fraction` of values: the ceil(fraction*n)-th
// largest value (nearest rank). Values tied with the threshold all pass.
double top_fraction_threshold(std::vector<double> values, double fraction);

// Selects features scoring at or above the top-x threshold, then unions in
// the globally top `top_fill` features by score.
std::set<FeatureId> top_percent_select(const FeatureScoreTable& table,
                                       const OperatorConfig& config);

// ---------------------------------------------------------------------------

struct OperatorContext {
  const FeatureCatalog* catalog = nullptr;
  OperatorConfig config;
  const std::map<OperatorId, FeatureScoreTable>* score_tables = nullptr;  // MI/MRMR/RFE
  std::string task_id;
};

// Applies one paraphrase operator to a patient record. Every result's tuple
// set is a subset of the input's. Random operators derive their stream from
// (rng_seed, patient_id, operator), so patients can run in parallel with
// stable results.
Rewrite apply_operator(const PatientEHR& ehr, OperatorId op, const OperatorContext& ctx);

}  // namespace ehrw
