#include "ehrw/ehr.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <map>

#include "ehrw/rewrite.hpp"

namespace ehrw {

std::vector<FeatureValueTuple> flatten_tuples(const PatientEHR& ehr) {
  std::vector<FeatureValueTuple> out;
  out.reserve(tuple_count(ehr));
  out.insert(out.end(), ehr.demographics.begin(), ehr.demographics.end());
  for (const auto& visit : ehr.visits) out.insert(out.end(), visit.begin(), visit.end());
  return out;
}

std::size_t tuple_count(const PatientEHR& ehr) {
  std::size_t n = ehr.demographics.size();
  for (const auto& visit : ehr.visits) n += visit.size();
  return n;
}

std::int64_t max_timestamp(const PatientEHR& ehr) {
  std::int64_t t = 0;
  for (const auto& d : ehr.demographics) t = std::max(t, d.timestamp);
  for (const auto& visit : ehr.visits) {
    for (const auto& fv : visit) t = std::max(t, fv.timestamp);
  }
  return t;
}

std::size_t token_length(std::string_view text) {
  std::size_t count = 0;
  bool in_token = false;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      in_token = false;
    } else if (!in_token) {
      in_token = true;
      ++count;
    }
  }
  return count;
}

std::string format_value(const Value& v) {
  if (is_missing(v)) return "(missing)";
  if (const auto* s = std::get_if<std::string>(&v)) return *s;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", std::get<double>(v));
  return buf;
}

VerbalizedEHR verbalize(const PatientEHR& ehr, const FeatureCatalog& catalog) {
  struct Line {
    std::int64_t timestamp;
    std::size_t input_index;
    std::string text;
  };
  std::array<std::vector<Line>, kNumModalities> sections;

  std::size_t index = 0;
  auto emit = [&](const FeatureValueTuple& fv) {
    const CatalogEntry& entry = catalog.at(fv.feature);
    std::string line = "- " + entry.display_name + ": " + format_value(fv.value);
    sections[static_cast<int>(entry.modality)].push_back({fv.timestamp, index, std::move(line)});
    ++index;
  };
  for (const auto& d : ehr.demographics) emit(d);
  for (const auto& visit : ehr.visits) {
    for (const auto& fv : visit) emit(fv);
  }

  std::string text;
  for (auto& section : sections) {
    if (section.empty()) continue;
    std::stable_sort(section.begin(), section.end(),
                     [](const Line& a, const Line& b) { return a.timestamp < b.timestamp; });
    if (!text.empty()) text += "\n";
    const int modality = static_cast<int>(&section - sections.data());
    text += "# ";
    text += modality_name(static_cast<Modality>(modality));
    for (const auto& line : section) {
      text += "\n";
      text += line.text;
    }
  }
  return {text, token_length(text)};
}

const char* validation_kind_name(ValidationIssue::Kind k) {
  using Kind = ValidationIssue::Kind;
  switch (k) {
    case Kind::UnknownFeature: return "UnknownFeature";
    case Kind::ValueKindMismatch: return "ValueKindMismatch";
    case Kind::TimestampOrder: return "TimestampOrder";
    case Kind::VisitOrder: return "VisitOrder";
    case Kind::NegativeTimestamp: return "NegativeTimestamp";
    case Kind::DemographicTimestamp: return "DemographicTimestamp";
  }
  return "?";
}

ValidationReport validate_ehr(const PatientEHR& ehr, const FeatureCatalog& catalog) {
  ValidationReport report;
  std::size_t index = 0;

  auto check_tuple = [&](const FeatureValueTuple& fv) {
    if (fv.timestamp < 0) {
      report.issues.push_back({ValidationIssue::Kind::NegativeTimestamp, index,
                               fv.feature + ": t=" + std::to_string(fv.timestamp)});
    }
    const CatalogEntry* entry = catalog.find(fv.feature);
    if (!entry) {
      report.issues.push_back({ValidationIssue::Kind::UnknownFeature, index, fv.feature});
      return;
    }
    if (!is_missing(fv.value)) {
      const bool numeric = is_numeric(fv.value);
      if (entry->value_kind == ValueKind::Numeric && !numeric) {
        report.issues.push_back(
            {ValidationIssue::Kind::ValueKindMismatch, index, fv.feature + ": expected numeric"});
      } else if (entry->value_kind == ValueKind::Categorical && numeric) {
        report.issues.push_back({ValidationIssue::Kind::ValueKindMismatch, index,
                                 fv.feature + ": expected categorical"});
      }
    }
  };

  for (const auto& d : ehr.demographics) {
    if (d.timestamp != 0) {
      report.issues.push_back({ValidationIssue::Kind::DemographicTimestamp, index,
                               d.feature + ": t=" + std::to_string(d.timestamp)});
    }
    check_tuple(d);
    ++index;
  }

  std::int64_t prev_visit_start = -1;
  for (std::size_t v = 0; v < ehr.visits.size(); ++v) {
    const Visit& visit = ehr.visits[v];
    std::int64_t prev_t = -1;
    for (const auto& fv : visit) {
      if (prev_t >= 0 && fv.timestamp < prev_t) {
        report.issues.push_back({ValidationIssue::Kind::TimestampOrder, index,
                                 "visit " + std::to_string(v) + ": t=" +
                                     std::to_string(fv.timestamp) + " after t=" +
                                     std::to_string(prev_t)});
      }
      prev_t = std::max(prev_t, fv.timestamp);
      check_tuple(fv);
      ++index;
    }
    if (!visit.empty()) {
      const std::int64_t start = visit.front().timestamp;
      if (prev_visit_start >= 0 && start < prev_visit_start) {
        report.issues.push_back({ValidationIssue::Kind::VisitOrder, index - visit.size(),
                                 "visit " + std::to_string(v) + " starts before visit " +
                                     std::to_string(v - 1)});
      }
      prev_visit_start = start;
    }
  }
  return report;
}

PatientEHR rewrite_to_ehr(const PatientEHR& source, const Rewrite& rewrite) {
  if (rewrite.patient_id != source.patient_id) {
    throw NotASubsetError("rewrite of patient " + rewrite.patient_id +
                          " applied to patient " + source.patient_id);
  }
  const std::size_t n = tuple_count(source);
  std::vector<bool> keep(n, false);
  for (std::uint32_t idx : rewrite.kept) {
    if (idx >= n) {
      throw NotASubsetError("rewrite index " + std::to_string(idx) + " out of range for patient " +
                            source.patient_id + " (" + std::to_string(n) + " tuples)");
    }
    keep[idx] = true;
  }

  PatientEHR out;
  out.patient_id = source.patient_id;
  out.attrs = source.attrs;
  std::size_t index = 0;
  for (const auto& d : source.demographics) {
    if (keep[index++]) out.demographics.push_back(d);
  }
  for (const auto& visit : source.visits) {
    Visit kept_visit;
    for (const auto& fv : visit) {
      if (keep[index++]) kept_visit.push_back(fv);
    }
    out.visits.push_back(std::move(kept_visit));
  }
  return out;
}

namespace {
// Ordered key for tuple multiset comparison; Value variants compare
// lexicographically by (alternative index, payload).
using TupleKey = std::tuple<std::string, std::size_t, std::string, std::int64_t>;

TupleKey tuple_key(const FeatureValueTuple& fv) {
  std::string payload;
  if (const auto* d = std::get_if<double>(&fv.value)) {
    payload = format_value(*d);
  } else if (const auto* s = std::get_if<std::string>(&fv.value)) {
    payload = *s;
  }
  return {fv.feature, fv.value.index(), payload, fv.timestamp};
}
}  // namespace

std::size_t subset_violations(const PatientEHR& source, const Rewrite& rewrite) {
  if (rewrite.patient_id != source.patient_id) return rewrite.kept.size();
  const std::size_t n = tuple_count(source);
  std::map<TupleKey, long> budget;
  for (const auto& fv : flatten_tuples(source)) budget[tuple_key(fv)] += 1;

  std::size_t violations = 0;
  std::vector<bool> seen(n, false);
  const auto flat = flatten_tuples(source);
  for (std::uint32_t idx : rewrite.kept) {
    if (idx >= n || seen[idx]) {
      ++violations;
      continue;
    }
    seen[idx] = true;
    auto it = budget.find(tuple_key(flat[idx]));
    if (it == budget.end() || it->second <= 0) {
      ++violations;
    } else {
      it->second -= 1;
    }
  }
  return violations;
}

}  // namespace ehrw
