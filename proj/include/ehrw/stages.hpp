#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ehrw/experiment.hpp"

namespace ehrw {

// One experiment run rooted at a working directory. Paths default to files
// inside the workdir; an external cohort/catalog can be pointed at instead
// of running gen-data.
struct RunConfig {
  std::string workdir = ".";
  std::string cohort_path;   // default: <workdir>/cohort.jsonl
  std::string catalog_path;  // default: <workdir>/catalog.json

  CohortSpec cohort_spec;
  ExperimentConfig exp;
  AblationMode mode = AblationMode::Full;

  std::string resolved_cohort_path() const;
  std::string resolved_catalog_path() const;

  static RunConfig from_json_file(const std::string& path);
  std::string to_json_string() const;
};

extern const std::vector<std::string> kStageNames;

// Runs one pipeline stage against the workdir: checks declared inputs
// (MissingArtifactError naming the absent file), skips when the manifest
// shows unchanged inputs and config, and writes outputs plus
// manifest_<stage>.json. `sweep` applies to the "sweep" stage only.
void run_stage(const std::string& stage, const RunConfig& config,
               const std::optional<std::string>& sweep = std::nullopt);

// All stages in order (gen-data .. evaluate).
void run_all_stages(const RunConfig& config);

// Formats a metrics.csv row set (header + one line per report); metric
// values are scaled by 100.
std::string metrics_csv(const std::vector<std::string>& tasks,
                        const std::vector<std::string>& modes, const std::vector<double>& alphas,
                        const std::vector<double>& lambdas,
                        const std::vector<MetricReport>& reports,
                        const std::vector<std::size_t>& bucket_edges);

}  // namespace ehrw
