#include "ehrw/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ehrw/parallel.hpp"
#include "ehrw/rng.hpp"

namespace ehrw {

namespace {

void check_sizes(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw PreconditionError("scores/labels length mismatch");
  if (scores.empty()) throw DegenerateLabelsError("empty input");
}

}  // namespace

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_sizes(scores, labels);
  std::size_t pos = 0, neg = 0;
  for (int y : labels) (y ? pos : neg) += 1;
  if (pos == 0 || neg == 0) throw DegenerateLabelsError("auroc needs both classes");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Walk ascending tie groups; positives in a group are concordant with all
  // negatives strictly below and take half credit against in-group negatives.
  double concordant = 0.0, tie_credit = 0.0;
  std::size_t neg_below = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    std::size_t group_pos = 0, group_neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? group_pos : group_neg) += 1;
      ++j;
    }
    concordant += static_cast<double>(group_pos) * static_cast<double>(neg_below);
    tie_credit += 0.5 * static_cast<double>(group_pos) * static_cast<double>(group_neg);
    neg_below += group_neg;
    i = j;
  }
  return (concordant + tie_credit) / (static_cast<double>(pos) * static_cast<double>(neg));
}

double auprc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_sizes(scores, labels);
  std::size_t pos = 0;
  for (int y : labels) pos += (y != 0);
  if (pos == 0) throw DegenerateLabelsError("auprc needs at least one positive");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double ap = 0.0;
  std::size_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    std::size_t group_tp = 0, group_fp = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? group_tp : group_fp) += 1;
      ++j;
    }
    tp += group_tp;
    fp += group_fp;
    // delta recall over this threshold times precision at it.
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (static_cast<double>(group_tp) / static_cast<double>(pos)) * precision;
    i = j;
  }
  return ap;
}

namespace {

struct BootstrapDraw {
  double auroc = 0.0;
  double auprc = 0.0;
  bool ok = false;
};

BootstrapDraw bootstrap_iteration(const std::vector<double>& scores,
                                  const std::vector<int>& labels, std::uint64_t seed) {
  const std::size_t n = scores.size();
  std::vector<double> s(n);
  std::vector<int> y(n);
  constexpr int kMaxRedraws = 100;
  for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
    Rng rng(derive_seed(seed, "redraw", attempt));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    bool has0 = false, has1 = false;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = pick(rng);
      s[i] = scores[k];
      y[i] = labels[k];
      (y[i] ? has1 : has0) = true;
    }
    if (has0 && has1) {
      return {auroc(s, y), auprc(s, y), true};
    }
  }
  return {};
}

MetricReport bootstrap_impl(const std::vector<double>& scores, const std::vector<int>& labels,
                            int n_iter, std::uint64_t seed, bool parallel) {
  check_sizes(scores, labels);
  if (n_iter < 1) throw PreconditionError("bootstrap_metrics: n_iter must be >= 1");

  std::vector<BootstrapDraw> draws(n_iter);
  auto body = [&](std::size_t i) {
    draws[i] = bootstrap_iteration(scores, labels, derive_seed(seed, "bootstrap", i));
  };
  if (parallel) {
    parallel_for(static_cast<std::size_t>(n_iter), body);
  } else {
    serial_for(static_cast<std::size_t>(n_iter), body);
  }

  MetricReport report;
  report.n_bootstrap = n_iter;
  double sum_roc = 0.0, sum_prc = 0.0;
  int ok = 0;
  for (const auto& d : draws) {
    if (!d.ok) {
      report.bootstrap_skipped += 1;
      continue;
    }
    sum_roc += d.auroc;
    sum_prc += d.auprc;
    ++ok;
  }
  if (ok > 0) {
    report.auroc = sum_roc / ok;
    report.auprc = sum_prc / ok;
    double var_roc = 0.0, var_prc = 0.0;
    for (const auto& d : draws) {
      if (!d.ok) continue;
      var_roc += (d.auroc - report.auroc) * (d.auroc - report.auroc);
      var_prc += (d.auprc - report.auprc) * (d.auprc - report.auprc);
    }
    report.auroc_std = std::sqrt(var_roc / ok);
    report.auprc_std = std::sqrt(var_prc / ok);
  }

  bool has0 = false, has1 = false;
  for (int y : labels) (y ? has1 : has0) = true;
  if (has0 && has1) {
    report.auroc_point = auroc(scores, labels);
    report.auprc_point = auprc(scores, labels);
  }
  return report;
}

}  // namespace

MetricReport bootstrap_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                               int n_iter, std::uint64_t seed) {
  return bootstrap_impl(scores, labels, n_iter, seed, /*parallel=*/true);
}

MetricReport bootstrap_metrics_serial(const std::vector<double>& scores,
                                      const std::vector<int>& labels, int n_iter,
                                      std::uint64_t seed) {
  return bootstrap_impl(scores, labels, n_iter, seed, /*parallel=*/false);
}

std::vector<std::string> stratum_labels(const std::vector<std::size_t>& edges) {
  std::vector<std::string> labels;
  if (edges.empty()) {
    labels.push_back("all");
    return labels;
  }
  labels.push_back("lt" + std::to_string(edges[0]));
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    labels.push_back(std::to_string(edges[i]) + "to" + std::to_string(edges[i + 1]));
  }
  labels.push_back("gt" + std::to_string(edges.back()));
  return labels;
}

std::map<std::string, StratumMetrics> stratified_report(const std::vector<PatientScore>& rows,
                                                        const std::vector<std::size_t>& edges) {
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    if (!(edges[i] < edges[i + 1])) throw PreconditionError("bucket edges must be increasing");
  }
  const std::vector<std::string> labels = stratum_labels(edges);
  const std::size_t n_buckets = labels.size();

  // [0, e1) | [e1, e2] ... | (ek, inf): below the first edge, above the
  // last edge, closed in between.
  auto bucket_of = [&](std::size_t len) -> std::size_t {
    if (edges.empty()) return 0;
    if (len < edges.front()) return 0;
    if (len > edges.back()) return n_buckets - 1;
    for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
      if (len >= edges[b] && (b + 2 < edges.size() ? len < edges[b + 1] : len <= edges[b + 1])) {
        return b + 1;
      }
    }
    return n_buckets - 2;
  };

  std::vector<std::vector<double>> scores(n_buckets);
  std::vector<std::vector<int>> ys(n_buckets);
  for (const auto& row : rows) {
    const std::size_t b = bucket_of(row.token_len);
    scores[b].push_back(row.score);
    ys[b].push_back(row.label);
  }

  std::map<std::string, StratumMetrics> out;
  for (std::size_t b = 0; b < n_buckets; ++b) {
    StratumMetrics m;
    m.count = scores[b].size();
    bool has0 = false, has1 = false;
    for (int y : ys[b]) (y ? has1 : has0) = true;
    if (m.count > 0 && has0 && has1) {
      m.auroc = auroc(scores[b], ys[b]);
      m.auprc = auprc(scores[b], ys[b]);
    } else {
      m.degenerate = m.count > 0;
    }
    out[labels[b]] = m;
  }
  return out;
}

}  // namespace ehrw
