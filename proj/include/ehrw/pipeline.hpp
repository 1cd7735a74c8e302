#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ehrw/feature_select.hpp"
#include "ehrw/predictor.hpp"
#include "ehrw/rewriter.hpp"
#include "ehrw/synth.hpp"

namespace ehrw {

struct Split {
  std::vector<std::uint32_t> train, val, test;
};

// Seeded shuffle split (train/val/test fractions; remainder goes to test).
Split split_cohort(std::size_t n, double train_frac, double val_frac, std::uint64_t seed);

// Throws if any fitting id is also a val/test id (leakage audit).
void assert_no_leakage(const std::vector<std::uint32_t>& fit_ids, const Split& split);

// One task's working view of a cohort: task-truncated patients with their
// labels, still indexed like the source cohort.
struct TaskView {
  std::string task_id;
  std::vector<PatientEHR> patients;  // truncated per task
  std::vector<int> labels;
};

TaskView make_task_view(const Cohort& cohort, const std::string& task_id,
                        const TaskParams& params = {});

// All eight operator rewrites for each covered patient.
struct CandidateRewriteSet {
  std::string task_id;
  struct PatientCandidates {
    std::uint32_t patient_index = 0;
    std::string patient_id;
    std::array<Rewrite, kNumOperators> rewrites;
  };
  std::vector<PatientCandidates> items;  // sorted by patient_id
};

// Builds the candidate set over `fit_ids`: score tables are computed once
// from those patients only, then every operator runs per patient (parallel,
// derived seeds). Optionally returns the tables for caching.
CandidateRewriteSet build_candidate_rewrites(
    const TaskView& view, const std::vector<std::uint32_t>& fit_ids,
    const FeatureCatalog& catalog, const OperatorConfig& config,
    std::map<OperatorId, FeatureScoreTable>* tables_out = nullptr);

// Serial reference for the candidate-generation kernel.
CandidateRewriteSet build_candidate_rewrites_serial(
    const TaskView& view, const std::vector<std::uint32_t>& fit_ids,
    const FeatureCatalog& catalog, const OperatorConfig& config,
    std::map<OperatorId, FeatureScoreTable>* tables_out = nullptr);

// Scorer training subset: a seeded `fraction` of the candidate set's
// patients, emitting (verbalized rewrite, inherited label) for each of
// their rewrites. Throws EmptySampleError when the sample rounds to zero.
std::vector<Example> build_scorer_subset(const TaskView& view, const CandidateRewriteSet& rwset,
                                         const FeatureCatalog& catalog, double fraction,
                                         std::uint64_t seed);

struct PseudoLabelDataset {
  struct Entry {
    PatientEHR original;
    Rewrite rewrite;
    std::string source_task;
  };
  std::vector<Entry> entries;
  double k_percent = 25.0;
  std::map<std::string, double> tau_per_task;

  std::vector<RewritePair> mask_pairs() const;
};

// Algorithm-1 selection: per task, score every rewrite with the scorer's
// probability of the patient's true label; tau_s is the nearest-rank
// top-k% threshold; keep rewrites scoring >= tau_s; union tasks.
PseudoLabelDataset select_pseudolabels(
    const std::map<std::string, const CandidateRewriteSet*>& rw_sets,
    const std::map<std::string, const TaskView*>& views,
    const std::map<std::string, const PredictorModel*>& scorers, const FeatureCatalog& catalog,
    double k_percent);

enum class ExampleOrigin { Original, OperatorRewrite, PolicyRewrite };
const char* origin_name(ExampleOrigin o);

struct AugmentedDataset {
  struct Entry {
    std::string text;
    int label = 0;
    ExampleOrigin origin = ExampleOrigin::Original;
    std::string patient_id;
  };
  std::vector<Entry> entries;

  std::vector<Example> examples() const;
};

// Originals + operator rewrites + sampled policy rewrites, labels inherited.
AugmentedDataset build_augmented(const TaskView& view, const std::vector<std::uint32_t>& ids,
                                 const CandidateRewriteSet& rwset, const RewriterPolicy& policy,
                                 int policy_rewrites_per_patient, const FeatureCatalog& catalog,
                                 std::uint64_t seed);

// Dual training groups: per patient, n_i policy samples with exact
// log-probabilities, next to the original text and label.
struct DualGroup {
  std::uint32_t patient_index = 0;
  std::string original_text;
  int label = 0;
  std::vector<Rewrite> candidates;
  std::vector<std::string> candidate_texts;
  std::vector<double> logprobs;
};

struct DualDataset {
  std::vector<DualGroup> groups;
};

DualDataset build_dual(const TaskView& view, const std::vector<std::uint32_t>& ids,
                       const RewriterPolicy& policy, int n_i, const FeatureCatalog& catalog,
                       std::uint64_t seed);

}  // namespace ehrw
