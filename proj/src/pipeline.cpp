#include "ehrw/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "ehrw/parallel.hpp"
#include "ehrw/rng.hpp"

namespace ehrw {

Split split_cohort(std::size_t n, double train_frac, double val_frac, std::uint64_t seed) {
  if (!(train_frac > 0) || !(val_frac >= 0) || train_frac + val_frac > 1.0) {
    throw ConfigError("bad split fractions");
  }
  std::vector<std::uint32_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(derive_seed(seed, "split"));
  std::shuffle(ids.begin(), ids.end(), rng);

  const std::size_t n_train = static_cast<std::size_t>(std::floor(train_frac * n));
  const std::size_t n_val = static_cast<std::size_t>(std::floor(val_frac * n));
  Split split;
  split.train.assign(ids.begin(), ids.begin() + n_train);
  split.val.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  split.test.assign(ids.begin() + n_train + n_val, ids.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

void assert_no_leakage(const std::vector<std::uint32_t>& fit_ids, const Split& split) {
  std::set<std::uint32_t> heldout(split.val.begin(), split.val.end());
  heldout.insert(split.test.begin(), split.test.end());
  for (std::uint32_t id : fit_ids) {
    if (heldout.count(id)) {
      throw Error("leakage: patient index " + std::to_string(id) +
                  " used for fitting but held out");
    }
  }
}

TaskView make_task_view(const Cohort& cohort, const std::string& task_id,
                        const TaskParams& params) {
  auto it = cohort.labels.find(task_id);
  if (it == cohort.labels.end()) throw ConfigError("cohort has no labels for task " + task_id);
  TaskView view;
  view.task_id = task_id;
  view.labels = it->second;
  view.patients.reserve(cohort.patients.size());
  for (const auto& p : cohort.patients) {
    view.patients.push_back(truncate_for_task(p, task_id, params));
  }
  return view;
}

namespace {

CandidateRewriteSet build_candidates_impl(const TaskView& view,
                                          const std::vector<std::uint32_t>& fit_ids,
                                          const FeatureCatalog& catalog,
                                          const OperatorConfig& config,
                                          std::map<OperatorId, FeatureScoreTable>* tables_out,
                                          bool parallel) {
  config.validate();
  if (fit_ids.empty()) throw PreconditionError("build_candidate_rewrites: no patients");

  std::vector<PatientEHR> fit_patients;
  std::vector<int> fit_labels;
  for (std::uint32_t id : fit_ids) {
    fit_patients.push_back(view.patients.at(id));
    fit_labels.push_back(view.labels.at(id));
  }

  // Score tables come from the fitting split only.
  std::map<OperatorId, FeatureScoreTable> tables;
  tables[OperatorId::Mi] = mutual_information_scores(fit_patients, fit_labels, catalog, config);
  tables[OperatorId::Mrmr] =
      ranking_to_table(mrmr_rank(fit_patients, fit_labels, catalog, config), OperatorId::Mrmr);
  tables[OperatorId::Rfe] =
      ranking_to_table(rfe_rank(fit_patients, fit_labels, catalog, config), OperatorId::Rfe);
  if (tables_out) *tables_out = tables;

  OperatorContext ctx;
  ctx.catalog = &catalog;
  ctx.config = config;
  ctx.score_tables = &tables;
  ctx.task_id = view.task_id;

  CandidateRewriteSet out;
  out.task_id = view.task_id;
  out.items.resize(fit_ids.size());
  auto body = [&](std::size_t i) {
    const std::uint32_t id = fit_ids[i];
    auto& item = out.items[i];
    item.patient_index = id;
    item.patient_id = view.patients[id].patient_id;
    for (int op = 0; op < kNumOperators; ++op) {
      item.rewrites[op] = apply_operator(view.patients[id], static_cast<OperatorId>(op), ctx);
    }
  };
  if (parallel) {
    parallel_for(fit_ids.size(), body);
  } else {
    serial_for(fit_ids.size(), body);
  }
  std::sort(out.items.begin(), out.items.end(),
            [](const auto& a, const auto& b) { return a.patient_id < b.patient_id; });
  return out;
}

}  // namespace

CandidateRewriteSet build_candidate_rewrites(const TaskView& view,
                                             const std::vector<std::uint32_t>& fit_ids,
                                             const FeatureCatalog& catalog,
                                             const OperatorConfig& config,
                                             std::map<OperatorId, FeatureScoreTable>* tables_out) {
  return build_candidates_impl(view, fit_ids, catalog, config, tables_out, /*parallel=*/true);
}

CandidateRewriteSet build_candidate_rewrites_serial(
    const TaskView& view, const std::vector<std::uint32_t>& fit_ids, const FeatureCatalog& catalog,
    const OperatorConfig& config, std::map<OperatorId, FeatureScoreTable>* tables_out) {
  return build_candidates_impl(view, fit_ids, catalog, config, tables_out, /*parallel=*/false);
}

std::vector<Example> build_scorer_subset(const TaskView& view, const CandidateRewriteSet& rwset,
                                         const FeatureCatalog& catalog, double fraction,
                                         std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("fraction must be in (0,1]");
  const std::size_t n = rwset.items.size();
  const std::size_t take = static_cast<std::size_t>(
      std::floor(fraction * static_cast<double>(n) + 1e-9));
  if (take == 0) throw EmptySampleError("scorer subset rounds to zero patients");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "scorer_subset"));
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(take);
  std::sort(order.begin(), order.end());

  std::vector<Example> out;
  out.reserve(take * kNumOperators);
  for (std::size_t i : order) {
    const auto& item = rwset.items[i];
    const PatientEHR& source = view.patients.at(item.patient_index);
    const int label = view.labels.at(item.patient_index);
    for (const auto& rw : item.rewrites) {
      out.emplace_back(verbalize(rewrite_to_ehr(source, rw), catalog).text, label);
    }
  }
  return out;
}

std::vector<RewritePair> PseudoLabelDataset::mask_pairs() const {
  std::vector<RewritePair> pairs;
  pairs.reserve(entries.size());
  for (const auto& e : entries) pairs.push_back({e.original, e.rewrite});
  return pairs;
}

PseudoLabelDataset select_pseudolabels(
    const std::map<std::string, const CandidateRewriteSet*>& rw_sets,
    const std::map<std::string, const TaskView*>& views,
    const std::map<std::string, const PredictorModel*>& scorers, const FeatureCatalog& catalog,
    double k_percent) {
  if (!(k_percent > 0.0 && k_percent <= 100.0)) throw ConfigError("k_percent must be in (0,100]");
  PseudoLabelDataset out;
  out.k_percent = k_percent;

  for (const auto& [task, rwset] : rw_sets) {
    const TaskView& view = *views.at(task);
    const PredictorModel& scorer = *scorers.at(task);

    // Score = scorer probability of the patient's true label.
    std::vector<std::string> texts;
    std::vector<double> scores;
    texts.reserve(rwset->items.size() * kNumOperators);
    for (const auto& item : rwset->items) {
      const PatientEHR& source = view.patients.at(item.patient_index);
      for (const auto& rw : item.rewrites) {
        texts.push_back(verbalize(rewrite_to_ehr(source, rw), catalog).text);
      }
    }
    const std::vector<double> probas = batch_predict_proba(scorer, texts);
    scores.reserve(probas.size());
    std::size_t t = 0;
    for (const auto& item : rwset->items) {
      const int y = view.labels.at(item.patient_index);
      for (int op = 0; op < kNumOperators; ++op, ++t) {
        scores.push_back(y == 1 ? probas[t] : 1.0 - probas[t]);
      }
    }

    const double tau = top_fraction_threshold(scores, k_percent / 100.0);
    out.tau_per_task[task] = tau;

    t = 0;
    for (const auto& item : rwset->items) {
      const PatientEHR& source = view.patients.at(item.patient_index);
      for (int op = 0; op < kNumOperators; ++op, ++t) {
        if (scores[t] >= tau) {
          out.entries.push_back({source, item.rewrites[op], task});
        }
      }
    }
  }
  return out;
}

const char* origin_name(ExampleOrigin o) {
  switch (o) {
    case ExampleOrigin::Original: return "original";
    case ExampleOrigin::OperatorRewrite: return "operator_rewrite";
    case ExampleOrigin::PolicyRewrite: return "policy_rewrite";
  }
  return "?";
}

std::vector<Example> AugmentedDataset::examples() const {
  std::vector<Example> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.emplace_back(e.text, e.label);
  return out;
}

AugmentedDataset build_augmented(const TaskView& view, const std::vector<std::uint32_t>& ids,
                                 const CandidateRewriteSet& rwset, const RewriterPolicy& policy,
                                 int policy_rewrites_per_patient, const FeatureCatalog& catalog,
                                 std::uint64_t seed) {
  std::map<std::uint32_t, const CandidateRewriteSet::PatientCandidates*> by_index;
  for (const auto& item : rwset.items) by_index[item.patient_index] = &item;

  std::vector<std::uint32_t> sorted_ids = ids;
  std::sort(sorted_ids.begin(), sorted_ids.end(), [&](std::uint32_t a, std::uint32_t b) {
    return view.patients.at(a).patient_id < view.patients.at(b).patient_id;
  });

  AugmentedDataset out;
  for (std::uint32_t id : sorted_ids) {
    const PatientEHR& source = view.patients.at(id);
    const int label = view.labels.at(id);
    out.entries.push_back(
        {verbalize(source, catalog).text, label, ExampleOrigin::Original, source.patient_id});
    if (auto it = by_index.find(id); it != by_index.end()) {
      for (const auto& rw : it->second->rewrites) {
        out.entries.push_back({verbalize(rewrite_to_ehr(source, rw), catalog).text, label,
                               ExampleOrigin::OperatorRewrite, source.patient_id});
      }
    }
    if (policy_rewrites_per_patient > 0) {
      const auto samples =
          sample_rewrites(policy, source, catalog, policy_rewrites_per_patient,
                          derive_seed(seed, source.patient_id, /*index=*/1));
      for (const auto& rw : samples) {
        out.entries.push_back({verbalize(rewrite_to_ehr(source, rw), catalog).text, label,
                               ExampleOrigin::PolicyRewrite, source.patient_id});
      }
    }
  }
  return out;
}

DualDataset build_dual(const TaskView& view, const std::vector<std::uint32_t>& ids,
                       const RewriterPolicy& policy, int n_i, const FeatureCatalog& catalog,
                       std::uint64_t seed) {
  if (n_i < 1) throw ConfigError("n_i must be >= 1");
  std::vector<std::uint32_t> sorted_ids = ids;
  std::sort(sorted_ids.begin(), sorted_ids.end(), [&](std::uint32_t a, std::uint32_t b) {
    return view.patients.at(a).patient_id < view.patients.at(b).patient_id;
  });

  DualDataset out;
  out.groups.resize(sorted_ids.size());
  parallel_for(sorted_ids.size(), [&](std::size_t i) {
    const std::uint32_t id = sorted_ids[i];
    const PatientEHR& source = view.patients.at(id);
    DualGroup& group = out.groups[i];
    group.patient_index = id;
    group.label = view.labels.at(id);
    group.original_text = verbalize(source, catalog).text;
    group.candidates =
        sample_rewrites(policy, source, catalog, n_i, derive_seed(seed, source.patient_id, 2));
    for (const auto& rw : group.candidates) {
      group.candidate_texts.push_back(verbalize(rewrite_to_ehr(source, rw), catalog).text);
      group.logprobs.push_back(rw.logprob.value());
    }
  });
  return out;
}

}  // namespace ehrw
