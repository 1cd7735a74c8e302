#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ehrw/types.hpp"

namespace ehrw {

// Rank-statistic AUROC: P(score_pos > score_neg) + 0.5 P(tie). Throws
// DegenerateLabelsError unless both classes are present.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Step-wise AUPRC over descending-score thresholds, ties grouped: the sum of
// delta-recall times precision at each threshold. Needs >= 1 positive.
double auprc(const std::vector<double>& scores, const std::vector<int>& labels);

struct StratumMetrics {
  std::optional<double> auroc;  // null when the bucket has a single class
  std::optional<double> auprc;
  std::size_t count = 0;
  bool degenerate = false;
};

struct MetricReport {
  double auroc = 0.0;  // bootstrap mean
  double auprc = 0.0;
  double auroc_std = 0.0;
  double auprc_std = 0.0;
  double auroc_point = 0.0;  // full-sample estimates
  double auprc_point = 0.0;
  int n_bootstrap = 0;
  int bootstrap_skipped = 0;
  std::map<std::string, StratumMetrics> strata;
};

// Bootstrap with replacement: n_iter resamples, per-iteration derived seeds
// (identical results for any worker count). Single-class resamples are
// redrawn a bounded number of times, then skipped and counted. Reports
// mean and population standard deviation per metric.
MetricReport bootstrap_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                               int n_iter, std::uint64_t seed);
// Serial reference for the OpenMP bootstrap kernel.
MetricReport bootstrap_metrics_serial(const std::vector<double>& scores,
                                      const std::vector<int>& labels, int n_iter,
                                      std::uint64_t seed);

struct PatientScore {
  double score = 0.0;
  int label = 0;
  std::size_t token_len = 0;
};

// Token-length buckets [0, e1), [e1, e2], (e2, inf) for two edges, and the
// analogous half-open/closed pattern for more. Buckets holding one class
// report null metrics with the degenerate flag set.
std::map<std::string, StratumMetrics> stratified_report(const std::vector<PatientScore>& rows,
                                                        const std::vector<std::size_t>& edges);

std::vector<std::string> stratum_labels(const std::vector<std::size_t>& edges);

}  // namespace ehrw
