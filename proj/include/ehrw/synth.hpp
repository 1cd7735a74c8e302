#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ehrw/catalog.hpp"
#include "ehrw/ehr.hpp"

namespace ehrw {

// A cohort: patients plus per-task binary labels aligned by index.
struct Cohort {
  std::vector<PatientEHR> patients;
  std::map<std::string, std::vector<int>> labels;  // task_id -> per-patient label
};

struct CohortSpec {
  int n_patients = 2000;
  int n_features = 40;
  int n_relevant = 5;
  double positive_rate_target = 0.02;
  std::pair<int, int> visits_per_patient{2, 3};
  std::pair<int, int> tuples_per_visit{3, 6};
  double noise_sigma = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

// Ground truth for feature-selection verification.
struct OracleInfo {
  std::set<FeatureId> relevant_features;
  std::map<FeatureId, double> weights;
  std::vector<double> true_logit;  // per patient
};

struct GeneratedCohort {
  Cohort cohort;
  FeatureCatalog catalog;
  OracleInfo oracle;
};

struct TaskParams {
  int ra_max_gap_days = 15;
  int los_min_days = 7;           // label 1 when stay is strictly longer
  std::int64_t los_input_hours = 48;
};

// Seeded synthetic cohort with planted predictive features. The planted
// signal drives the target task's label; the bias/shift is solved by
// bisection so the empirical positive rate lands within +-20% relative of
// positive_rate_target. Labels for all three tasks are generated. Latent
// attributes (mor_logit, mor_u, gap_days, stay_days) ride on each patient.
GeneratedCohort generate_cohort(const CohortSpec& spec, const std::string& task_id);

// Binary label from the record's latent attributes. Throws
// MissingAttributeError when the cohort lacks the task's attribute.
int label_task(const PatientEHR& ehr, const std::string& task_id,
               const TaskParams& params = {});

// Task input view: LOS restricts tuples to the first los_input_hours,
// other tasks pass the record through.
PatientEHR truncate_for_task(const PatientEHR& ehr, const std::string& task_id,
                             const TaskParams& params = {});

// ---------------------------------------------------------------------------
// JSONL cohort file: one patient object per line with keys patient_id,
// demographics, visits, labels (and attrs when present). Catalog file: a
// JSON map FeatureId -> {display_name, modality, reference_range?, value_kind}.

void save_cohort(const std::string& path, const Cohort& cohort);
// `required_tasks`: every patient must carry a label for each; a missing
// one raises SchemaError naming labels.<task>.
Cohort load_cohort(const std::string& path, const std::vector<std::string>& required_tasks = {});

void save_catalog(const std::string& path, const FeatureCatalog& catalog);
FeatureCatalog load_catalog(const std::string& path);

}  // namespace ehrw
