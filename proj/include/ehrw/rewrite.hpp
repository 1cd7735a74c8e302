#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ehrw/ehr.hpp"

namespace ehrw {

// A derived EHR: a subset of the source record's tuples, addressed by
// canonical flat indices. `provenance` names the producing operator
// ("temporal", ..., "identity") or "policy"/"external". `logprob` is the
// exact generation log-probability when the producer defines one.
struct Rewrite {
  std::string patient_id;
  std::vector<std::uint32_t> kept;  // sorted, unique, canonical indices
  std::string provenance;
  std::optional<double> logprob;
};

// Materializes the rewrite as a PatientEHR, preserving the source's
// demographics/visit structure (visits may end up empty). Throws
// NotASubsetError when indices are out of range or the patient ids differ.
PatientEHR rewrite_to_ehr(const PatientEHR& source, const Rewrite& rewrite);

// Independent faithfulness check: the rewrite's tuple multiset must be
// contained in the source's. Returns the number of violations (0 = subset).
std::size_t subset_violations(const PatientEHR& source, const Rewrite& rewrite);

}  // namespace ehrw
