#include "ehrw/feature_select.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "ehrw/rng.hpp"

namespace ehrw {

const char* operator_name(OperatorId op) {
  switch (op) {
    case OperatorId::Temporal: return "temporal";
    case OperatorId::Abnormal: return "abnormal";
    case OperatorId::Mi: return "mi";
    case OperatorId::Mrmr: return "mrmr";
    case OperatorId::Rfe: return "rfe";
    case OperatorId::RandFeature: return "rand_feature";
    case OperatorId::RandTuple: return "rand_tuple";
    case OperatorId::Identity: return "identity";
  }
  return "?";
}

OperatorId operator_from_name(const std::string& name) {
  for (int i = 0; i < kNumOperators; ++i) {
    if (name == operator_name(static_cast<OperatorId>(i))) return static_cast<OperatorId>(i);
  }
  throw ConfigError("unknown operator: " + name);
}

void OperatorConfig::validate() const {
  if (!(x_percent > 0.0 && x_percent <= 1.0)) throw ConfigError("x_percent must be in (0,1]");
  if (top_fill < 0) throw ConfigError("top_fill must be >= 0");
  if (mi_bins < 2) throw ConfigError("mi_bins must be >= 2");
  if (!(rfe_step_fraction > 0.0 && rfe_step_fraction <= 1.0)) {
    throw ConfigError("rfe_step_fraction must be in (0,1]");
  }
}

namespace {

void require_both_labels(const std::vector<int>& labels) {
  bool has0 = false, has1 = false;
  for (int y : labels) (y ? has1 : has0) = true;
  if (labels.empty() || !has0 || !has1) {
    throw DegenerateLabelsError("need both classes present");
  }
}

// Last non-missing value of `feature` in canonical tuple order, or nullopt.
std::optional<Value> last_value(const PatientEHR& ehr, const FeatureId& feature) {
  std::optional<Value> out;
  auto scan = [&](const FeatureValueTuple& fv) {
    if (fv.feature == feature && !is_missing(fv.value)) out = fv.value;
  };
  for (const auto& d : ehr.demographics) scan(d);
  for (const auto& visit : ehr.visits) {
    for (const auto& fv : visit) scan(fv);
  }
  return out;
}

// Most frequent categorical value; ties take the lexically smallest.
std::optional<std::string> mode_value(const PatientEHR& ehr, const FeatureId& feature) {
  std::map<std::string, int> counts;
  auto scan = [&](const FeatureValueTuple& fv) {
    if (fv.feature != feature) return;
    if (const auto* s = std::get_if<std::string>(&fv.value)) counts[*s] += 1;
  };
  for (const auto& d : ehr.demographics) scan(d);
  for (const auto& visit : ehr.visits) {
    for (const auto& fv : visit) scan(fv);
  }
  if (counts.empty()) return std::nullopt;
  auto best = counts.begin();
  for (auto it = counts.begin(); it != counts.end(); ++it) {
    if (it->second > best->second) best = it;
  }
  return best->first;
}

}  // namespace

std::vector<FeatureId> features_present(const std::vector<PatientEHR>& patients) {
  std::set<FeatureId> set;
  for (const auto& p : patients) {
    for (const auto& fv : flatten_tuples(p)) set.insert(fv.feature);
  }
  return {set.begin(), set.end()};
}

BinnedFeature bin_feature(const std::vector<PatientEHR>& patients, const FeatureId& feature,
                          const CatalogEntry& entry, int mi_bins) {
  const std::size_t n = patients.size();
  BinnedFeature out;
  out.codes.assign(n, -1);

  if (entry.value_kind == ValueKind::Numeric) {
    std::vector<std::pair<double, std::size_t>> present;  // (value, patient)
    for (std::size_t i = 0; i < n; ++i) {
      auto v = last_value(patients[i], feature);
      if (v && is_numeric(*v)) present.emplace_back(std::get<double>(*v), i);
    }
    if (present.empty()) {
      out.n_codes = 1;
      out.all_absent = true;
      std::fill(out.codes.begin(), out.codes.end(), 0);
      return out;
    }
    std::sort(present.begin(), present.end());
    // Equal-frequency bins; runs of equal values never split across bins.
    const std::size_t m = present.size();
    const double target = static_cast<double>(m) / mi_bins;
    int bin = 0;
    std::size_t i = 0;
    while (i < m) {
      std::size_t j = i;
      while (j < m && present[j].first == present[i].first) ++j;
      // Close the current bin before this run if it is already full.
      if (i > 0 && static_cast<double>(i) >= target * (bin + 1) && bin + 1 < mi_bins) ++bin;
      for (std::size_t k = i; k < j; ++k) out.codes[present[k].second] = bin;
      i = j;
    }
    int used = bin + 1;
    bool any_absent = false;
    for (auto& c : out.codes) {
      if (c < 0) {
        c = used;
        any_absent = true;
      }
    }
    out.n_codes = used + (any_absent ? 1 : 0);
    return out;
  }

  // Categorical: distinct modes in sorted order, absent last.
  std::vector<std::optional<std::string>> modes(n);
  std::set<std::string> values;
  for (std::size_t i = 0; i < n; ++i) {
    modes[i] = mode_value(patients[i], feature);
    if (modes[i]) values.insert(*modes[i]);
  }
  std::map<std::string, int> code_of;
  int next = 0;
  for (const auto& v : values) code_of[v] = next++;
  bool any_absent = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (modes[i]) {
      out.codes[i] = code_of[*modes[i]];
    } else {
      out.codes[i] = next;
      any_absent = true;
    }
  }
  out.n_codes = next + (any_absent ? 1 : 0);
  out.all_absent = values.empty();
  if (out.n_codes == 0) out.n_codes = 1;
  return out;
}

double plugin_entropy(const std::vector<int>& x) {
  if (x.empty()) return 0.0;
  std::map<int, std::size_t> counts;
  for (int v : x) counts[v] += 1;
  const double n = static_cast<double>(x.size());
  double h = 0.0;
  for (const auto& [_, c] : counts) {
    const double p = c / n;
    h -= p * std::log(p);
  }
  return h;
}

double plugin_mi(const std::vector<int>& x, const std::vector<int>& y) {
  if (x.size() != y.size()) throw PreconditionError("plugin_mi: length mismatch");
  if (x.empty()) return 0.0;
  std::map<std::pair<int, int>, std::size_t> joint;
  std::map<int, std::size_t> mx, my;
  for (std::size_t i = 0; i < x.size(); ++i) {
    joint[{x[i], y[i]}] += 1;
    mx[x[i]] += 1;
    my[y[i]] += 1;
  }
  const double n = static_cast<double>(x.size());
  double mi = 0.0;
  for (const auto& [xy, c] : joint) {
    const double pxy = c / n;
    const double px = mx[xy.first] / n;
    const double py = my[xy.second] / n;
    mi += pxy * std::log(pxy / (px * py));
  }
  return std::max(0.0, mi);
}

FeatureScoreTable mutual_information_scores(const std::vector<PatientEHR>& patients,
                                            const std::vector<int>& labels,
                                            const FeatureCatalog& catalog,
                                            const OperatorConfig& config) {
  config.validate();
  require_both_labels(labels);
  FeatureScoreTable table;
  table.method = OperatorId::Mi;
  for (const auto& feature : features_present(patients)) {
    const BinnedFeature binned = bin_feature(patients, feature, catalog.at(feature), config.mi_bins);
    table.scores[feature] = plugin_mi(binned.codes, labels);
  }
  return table;
}

std::vector<FeatureId> mrmr_rank(const std::vector<PatientEHR>& patients,
                                 const std::vector<int>& labels, const FeatureCatalog& catalog,
                                 const OperatorConfig& config) {
  config.validate();
  require_both_labels(labels);
  const std::vector<FeatureId> features = features_present(patients);
  if (features.size() < 2) throw PreconditionError("mrmr_rank needs at least 2 candidate features");

  std::map<FeatureId, BinnedFeature> binned;
  std::map<FeatureId, double> relevance;
  for (const auto& f : features) {
    binned[f] = bin_feature(patients, f, catalog.at(f), config.mi_bins);
    relevance[f] = plugin_mi(binned[f].codes, labels);
  }

  std::vector<FeatureId> ranking;
  std::set<FeatureId> remaining(features.begin(), features.end());
  std::map<FeatureId, double> redundancy_sum;
  while (!remaining.empty()) {
    FeatureId best;
    double best_score = -std::numeric_limits<double>::infinity();
    for (const auto& f : remaining) {  // set iteration = lexical tie-break
      const double redundancy =
          ranking.empty() ? 0.0 : redundancy_sum[f] / static_cast<double>(ranking.size());
      const double score = relevance[f] - redundancy;
      if (score > best_score) {
        best_score = score;
        best = f;
      }
    }
    ranking.push_back(best);
    remaining.erase(best);
    for (const auto& f : remaining) {
      redundancy_sum[f] += plugin_mi(binned[f].codes, binned[best].codes);
    }
  }
  return ranking;
}

namespace {

// Scalar per-feature column: standardized last value (numeric) or
// standardized sorted-category index (categorical); absent imputes 0.
std::vector<double> feature_column(const std::vector<PatientEHR>& patients,
                                   const FeatureId& feature, const CatalogEntry& entry) {
  const std::size_t n = patients.size();
  std::vector<double> raw(n);
  std::vector<bool> present(n, false);
  if (entry.value_kind == ValueKind::Numeric) {
    for (std::size_t i = 0; i < n; ++i) {
      auto v = last_value(patients[i], feature);
      if (v && is_numeric(*v)) {
        raw[i] = std::get<double>(*v);
        present[i] = true;
      }
    }
  } else {
    std::vector<std::optional<std::string>> modes(n);
    std::set<std::string> values;
    for (std::size_t i = 0; i < n; ++i) {
      modes[i] = mode_value(patients[i], feature);
      if (modes[i]) values.insert(*modes[i]);
    }
    std::map<std::string, int> code;
    int next = 0;
    for (const auto& v : values) code[v] = next++;
    for (std::size_t i = 0; i < n; ++i) {
      if (modes[i]) {
        raw[i] = code[*modes[i]];
        present[i] = true;
      }
    }
  }

  double sum = 0.0, count = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (present[i]) {
      sum += raw[i];
      count += 1.0;
    }
  }
  const double mean = count > 0 ? sum / count : 0.0;
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (present[i]) var += (raw[i] - mean) * (raw[i] - mean);
  }
  const double sd = count > 0 ? std::sqrt(var / count) : 0.0;

  std::vector<double> out(n, 0.0);
  if (sd > 0) {
    for (std::size_t i = 0; i < n; ++i) {
      if (present[i]) out[i] = (raw[i] - mean) / sd;
    }
  }
  return out;
}

// Dense logistic regression fit by full-batch gradient descent; returns
// the coefficient vector (no intercept in the output).
std::vector<double> fit_dense_logistic(const std::vector<std::vector<double>>& columns,
                                       const std::vector<int>& labels, int iters, double lr) {
  const std::size_t d = columns.size();
  const std::size_t n = labels.size();
  std::vector<double> w(d, 0.0);
  double b = 0.0;
  std::vector<double> logits(n);
  for (int it = 0; it < iters; ++it) {
    std::fill(logits.begin(), logits.end(), b);
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t i = 0; i < n; ++i) logits[i] += w[j] * columns[j][i];
    }
    std::vector<double> residual(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double p = 1.0 / (1.0 + std::exp(-logits[i]));
      residual[i] = p - labels[i];
    }
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) gb += residual[i];
    b -= lr * gb / n;
    for (std::size_t j = 0; j < d; ++j) {
      double g = 0.0;
      for (std::size_t i = 0; i < n; ++i) g += residual[i] * columns[j][i];
      w[j] -= lr * g / n;
    }
  }
  return w;
}

}  // namespace

std::vector<FeatureId> rfe_rank(const std::vector<PatientEHR>& patients,
                                const std::vector<int>& labels, const FeatureCatalog& catalog,
                                const OperatorConfig& config) {
  config.validate();
  require_both_labels(labels);
  const std::vector<FeatureId> features = features_present(patients);
  if (features.empty()) return {};

  std::map<FeatureId, std::vector<double>> columns;
  bool any_varying = false;
  for (const auto& f : features) {
    columns[f] = feature_column(patients, f, catalog.at(f));
    for (double v : columns[f]) {
      if (v != 0.0) {
        any_varying = true;
        break;
      }
    }
  }
  if (!any_varying) {
    std::cerr << "warning: rfe_rank: all features degenerate (constant); "
                 "falling back to lexical ranking\n";
    return features;
  }

  std::vector<FeatureId> remaining = features;
  std::vector<FeatureId> eliminated;  // first eliminated = least important
  while (!remaining.empty()) {
    std::vector<std::vector<double>> mat;
    mat.reserve(remaining.size());
    for (const auto& f : remaining) mat.push_back(columns[f]);
    const std::vector<double> coef = fit_dense_logistic(mat, labels, 150, 1.0);

    const std::size_t drop =
        std::min(remaining.size(),
                 static_cast<std::size_t>(
                     std::ceil(config.rfe_step_fraction * static_cast<double>(remaining.size()))));
    std::vector<std::size_t> order(remaining.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double ma = std::abs(coef[a]), mb = std::abs(coef[b]);
      if (ma != mb) return ma < mb;
      return remaining[a] < remaining[b];
    });
    std::set<std::size_t> dropped(order.begin(), order.begin() + drop);
    std::vector<FeatureId> next;
    for (std::size_t i = 0; i < remaining.size(); ++i) {
      if (dropped.count(i)) continue;
      next.push_back(remaining[i]);
    }
    for (std::size_t i = 0; i < drop; ++i) eliminated.push_back(remaining[order[i]]);
    remaining = std::move(next);
  }
  return {eliminated.rbegin(), eliminated.rend()};
}

FeatureScoreTable ranking_to_table(const std::vector<FeatureId>& ranking, OperatorId method) {
  FeatureScoreTable table;
  table.method = method;
  const double n = static_cast<double>(ranking.size());
  for (std::size_t i = 0; i < ranking.size(); ++i) {
    table.scores[ranking[i]] = n - static_cast<double>(i);
  }
  return table;
}

double top_fraction_threshold(std::vector<double> values, double fraction) {
  if (values.empty()) throw PreconditionError("top_fraction_threshold: empty values");
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw PreconditionError("top_fraction_threshold: fraction must be in (0,1]");
  }
  const std::size_t n = values.size();
  const std::size_t m = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-12)), 1, n);
  std::sort(values.begin(), values.end(), std::greater<double>());
  return values[m - 1];  // m-th largest
}

std::set<FeatureId> top_percent_select(const FeatureScoreTable& table,
                                       const OperatorConfig& config) {
  if (table.scores.empty()) throw PreconditionError("top_percent_select: empty table");
  std::vector<double> values;
  values.reserve(table.scores.size());
  for (const auto& [_, s] : table.scores) values.push_back(s);
  const double threshold = top_fraction_threshold(values, config.x_percent);

  std::set<FeatureId> selected;
  for (const auto& [f, s] : table.scores) {
    if (s >= threshold) selected.insert(f);
  }

  if (config.top_fill > 0) {
    std::vector<std::pair<double, FeatureId>> by_score;
    for (const auto& [f, s] : table.scores) by_score.emplace_back(s, f);
    std::sort(by_score.begin(), by_score.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    const std::size_t fill = std::min<std::size_t>(config.top_fill, by_score.size());
    for (std::size_t i = 0; i < fill; ++i) selected.insert(by_score[i].second);
  }
  return selected;
}

namespace {

Rewrite make_rewrite(const PatientEHR& ehr, OperatorId op, std::vector<std::uint32_t> kept) {
  std::sort(kept.begin(), kept.end());
  return Rewrite{ehr.patient_id, std::move(kept), operator_name(op), std::nullopt};
}

}  // namespace

Rewrite apply_operator(const PatientEHR& ehr, OperatorId op, const OperatorContext& ctx) {
  ctx.config.validate();
  const FeatureCatalog& catalog = *ctx.catalog;
  const std::vector<FeatureValueTuple> tuples = flatten_tuples(ehr);
  const std::size_t n = tuples.size();
  std::vector<std::uint32_t> kept;

  switch (op) {
    case OperatorId::Identity: {
      kept.resize(n);
      std::iota(kept.begin(), kept.end(), 0);
      break;
    }
    case OperatorId::Temporal: {
      const std::int64_t t_max = max_timestamp(ehr);
      const std::int64_t cutoff = static_cast<std::int64_t>(
          std::ceil((1.0 - ctx.config.x_percent) * static_cast<double>(t_max)));
      for (std::size_t i = 0; i < n; ++i) {
        if (tuples[i].timestamp >= cutoff) kept.push_back(i);
      }
      break;
    }
    case OperatorId::Abnormal: {
      for (std::size_t i = 0; i < n; ++i) {
        const CatalogEntry& entry = catalog.at(tuples[i].feature);
        if (!entry.reference_range || !is_numeric(tuples[i].value)) continue;
        const double v = std::get<double>(tuples[i].value);
        if (v < entry.reference_range->first || v > entry.reference_range->second) {
          kept.push_back(i);
        }
      }
      break;
    }
    case OperatorId::Mi:
    case OperatorId::Mrmr:
    case OperatorId::Rfe: {
      if (!ctx.score_tables || !ctx.score_tables->count(op)) {
        throw MissingScoreTableError(std::string("no score table for operator ") +
                                     operator_name(op));
      }
      const std::set<FeatureId> selected =
          top_percent_select(ctx.score_tables->at(op), ctx.config);
      for (std::size_t i = 0; i < n; ++i) {
        if (selected.count(tuples[i].feature)) kept.push_back(i);
      }
      break;
    }
    case OperatorId::RandFeature: {
      std::set<FeatureId> present;
      for (const auto& fv : tuples) present.insert(fv.feature);
      std::vector<FeatureId> pool(present.begin(), present.end());
      const std::size_t k = static_cast<std::size_t>(
          std::ceil(ctx.config.x_percent * static_cast<double>(pool.size())));
      Rng rng(derive_seed(ctx.config.rng_seed, ehr.patient_id, static_cast<int>(op)));
      for (std::size_t i = 0; i < k && i < pool.size(); ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
        std::swap(pool[i], pool[pick(rng)]);
      }
      std::set<FeatureId> chosen(pool.begin(), pool.begin() + std::min(k, pool.size()));
      for (std::size_t i = 0; i < n; ++i) {
        if (chosen.count(tuples[i].feature)) kept.push_back(i);
      }
      break;
    }
    case OperatorId::RandTuple: {
      const std::size_t k =
          static_cast<std::size_t>(std::ceil(ctx.config.x_percent * static_cast<double>(n)));
      std::vector<std::uint32_t> pool(n);
      std::iota(pool.begin(), pool.end(), 0);
      Rng rng(derive_seed(ctx.config.rng_seed, ehr.patient_id, static_cast<int>(op)));
      for (std::size_t i = 0; i < k && i < n; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(pool[i], pool[pick(rng)]);
      }
      kept.assign(pool.begin(), pool.begin() + std::min(k, pool.size()));
      break;
    }
  }
  return make_rewrite(ehr, op, std::move(kept));
}

}  // namespace ehrw
