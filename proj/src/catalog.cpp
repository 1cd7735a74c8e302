#include "ehrw/catalog.hpp"

namespace ehrw {

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::Demographic: return "demographic";
    case Modality::Diagnosis: return "diagnosis";
    case Modality::Lab: return "lab";
    case Modality::Medication: return "medication";
    case Modality::Procedure: return "procedure";
    case Modality::Other: return "other";
  }
  return "other";
}

Modality modality_from_name(const std::string& name) {
  for (int i = 0; i < kNumModalities; ++i) {
    if (name == modality_name(static_cast<Modality>(i))) return static_cast<Modality>(i);
  }
  throw ConfigError("unknown modality: " + name);
}

const char* value_kind_name(ValueKind k) {
  return k == ValueKind::Numeric ? "numeric" : "categorical";
}

ValueKind value_kind_from_name(const std::string& name) {
  if (name == "numeric") return ValueKind::Numeric;
  if (name == "categorical") return ValueKind::Categorical;
  throw ConfigError("unknown value_kind: " + name);
}

void FeatureCatalog::add(const FeatureId& id, CatalogEntry entry) {
  if (entries_.count(id)) throw ConfigError("duplicate feature id: " + id);
  if (entry.reference_range) {
    if (entry.value_kind != ValueKind::Numeric) {
      throw ConfigError("reference range on non-numeric feature: " + id);
    }
    if (!(entry.reference_range->first < entry.reference_range->second)) {
      throw ConfigError("reference range requires min < max: " + id);
    }
  }
  entries_.emplace(id, std::move(entry));
}

const CatalogEntry* FeatureCatalog::find(const FeatureId& id) const {
  auto it = entries_.find(id);
  return it == entries_.end() ? nullptr : &it->second;
}

const CatalogEntry& FeatureCatalog::at(const FeatureId& id) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) throw UnknownFeatureError("unknown feature: " + id);
  return it->second;
}

}  // namespace ehrw
