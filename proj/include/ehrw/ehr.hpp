#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ehrw/catalog.hpp"
#include "ehrw/types.hpp"

namespace ehrw {

struct FeatureValueTuple {
  FeatureId feature;
  Value value;
  std::int64_t timestamp = 0;

  bool operator==(const FeatureValueTuple&) const = default;
};

using Visit = std::vector<FeatureValueTuple>;

// Longitudinal patient record: demographics at t=0 plus visit-grouped
// feature-value tuples. `attrs` carries latent per-patient attributes
// (visit gap, stay length, ...) used by the synthetic task labelers;
// they are never verbalized.
struct PatientEHR {
  std::string patient_id;
  std::vector<FeatureValueTuple> demographics;
  std::vector<Visit> visits;
  std::map<std::string, double> attrs;

  bool operator==(const PatientEHR&) const = default;
};

// Canonical flat tuple order: demographics first, then visits in order.
// Masks and rewrites index into this order.
std::vector<FeatureValueTuple> flatten_tuples(const PatientEHR& ehr);
std::size_t tuple_count(const PatientEHR& ehr);
std::int64_t max_timestamp(const PatientEHR& ehr);  // 0 when no tuples

struct VerbalizedEHR {
  std::string text;
  std::size_t token_count = 0;
};

// Whitespace-delimited token count; the length measure used for
// stratification buckets.
std::size_t token_length(std::string_view text);
inline std::size_t token_length(const VerbalizedEHR& v) { return token_length(v.text); }

// Markdown rendering of a numeric/categorical/missing value. Numerics keep
// up to 4 significant digits with trailing zeros trimmed so round-trips are
// byte-stable.
std::string format_value(const Value& v);

// Renders the record as markdown: one "# {modality}" header per modality
// present (fixed Modality order), then "- {display_name}: {value}" lines in
// timestamp order; ties keep the canonical tuple order. Pure and
// deterministic. Throws UnknownFeatureError for features not in `catalog`.
VerbalizedEHR verbalize(const PatientEHR& ehr, const FeatureCatalog& catalog);

struct ValidationIssue {
  enum class Kind {
    UnknownFeature,
    ValueKindMismatch,
    TimestampOrder,
    VisitOrder,
    NegativeTimestamp,
    DemographicTimestamp,
  };
  Kind kind;
  std::size_t tuple_index = 0;  // canonical flat index
  std::string detail;
};

struct ValidationReport {
  std::vector<ValidationIssue> issues;
  bool ok() const { return issues.empty(); }
};

const char* validation_kind_name(ValidationIssue::Kind k);

// Checks every EHR invariant against the catalog and reports all
// violations; never throws.
ValidationReport validate_ehr(const PatientEHR& ehr, const FeatureCatalog& catalog);

}  // namespace ehrw
