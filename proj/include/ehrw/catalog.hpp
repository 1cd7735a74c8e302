#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>

#include "ehrw/types.hpp"

namespace ehrw {

struct CatalogEntry {
  std::string display_name;
  Modality modality = Modality::Other;
  std::optional<std::pair<double, double>> reference_range;  // [min, max], numeric only
  ValueKind value_kind = ValueKind::Numeric;
};

// Reference set of features. Entries are keyed by FeatureId and kept in a
// sorted map so every iteration order in the project is deterministic.
class FeatureCatalog {
 public:
  void add(const FeatureId& id, CatalogEntry entry);

  const CatalogEntry* find(const FeatureId& id) const;
  const CatalogEntry& at(const FeatureId& id) const;  // throws UnknownFeatureError
  bool contains(const FeatureId& id) const { return entries_.count(id) > 0; }
  std::size_t size() const { return entries_.size(); }

  const std::map<FeatureId, CatalogEntry>& entries() const { return entries_; }

 private:
  std::map<FeatureId, CatalogEntry> entries_;
};

}  // namespace ehrw
