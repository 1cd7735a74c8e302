#include "ehrw/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

#include "ehrw/rng.hpp"

namespace ehrw {

using nlohmann::json;

void CohortSpec::validate() const {
  if (n_patients < 1) throw ConfigError("n_patients must be >= 1");
  if (n_features < 1) throw ConfigError("n_features must be >= 1");
  if (n_relevant < 0 || n_relevant > n_features) {
    throw ConfigError("n_relevant must be in [0, n_features]");
  }
  if (!(positive_rate_target > 0.0 && positive_rate_target < 1.0)) {
    throw ConfigError("positive_rate_target must be in (0,1)");
  }
  if (visits_per_patient.first < 1 || visits_per_patient.second < visits_per_patient.first) {
    throw ConfigError("bad visits_per_patient range");
  }
  if (tuples_per_visit.first < 1 || tuples_per_visit.second < tuples_per_visit.first) {
    throw ConfigError("bad tuples_per_visit range");
  }
  if (noise_sigma < 0) throw ConfigError("noise_sigma must be >= 0");
}

namespace {

std::string feature_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "feat_%03d", i);
  return buf;
}

std::string patient_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "p%05d", i);
  return buf;
}

// Monotone-threshold calibration: finds shift so that the empirical rate of
// indicator(u_i < sigmoid(shift + s_i)) hits the target within tolerance.
double bisect_shift(const std::vector<double>& signal, const std::vector<double>& u,
                    double target, bool increasing_in_shift) {
  auto rate = [&](double shift) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < signal.size(); ++i) {
      const double p = 1.0 / (1.0 + std::exp(-(shift + signal[i])));
      hits += (u[i] < p) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(signal.size());
  };
  double lo = -40.0, hi = 40.0;
  auto dir_rate = [&](double s) { return increasing_in_shift ? rate(s) : 1.0 - rate(s); };
  if (dir_rate(lo) > target || dir_rate(hi) < target) {
    throw InfeasibleSpecError("cannot calibrate positive rate to target " +
                              std::to_string(target));
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (dir_rate(mid) < target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return hi;
}

}  // namespace

GeneratedCohort generate_cohort(const CohortSpec& spec, const std::string& task_id) {
  spec.validate();
  if (task_id != "mor" && task_id != "ra" && task_id != "los") {
    throw ConfigError("generate_cohort: unknown task_id " + task_id);
  }
  Rng rng(make_rng(spec.seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  GeneratedCohort out;

  // Catalog: demographics plus n_features task markers. Roughly one in five
  // markers is categorical; reference ranges land on half of the numerics.
  out.catalog.add("age", {"age", Modality::Demographic, std::nullopt, ValueKind::Numeric});
  out.catalog.add("sex", {"sex", Modality::Demographic, std::nullopt, ValueKind::Categorical});
  const Modality modality_cycle[4] = {Modality::Lab, Modality::Diagnosis, Modality::Medication,
                                      Modality::Procedure};
  std::vector<FeatureId> features;
  std::vector<bool> categorical(spec.n_features, false);
  for (int i = 0; i < spec.n_features; ++i) {
    const FeatureId id = feature_name(i);
    features.push_back(id);
    const bool is_cat = i >= spec.n_relevant && (i % 5 == 4);
    categorical[i] = is_cat;
    CatalogEntry entry;
    entry.display_name = id;
    entry.modality = is_cat ? Modality::Diagnosis : modality_cycle[i % 4];
    entry.value_kind = is_cat ? ValueKind::Categorical : ValueKind::Numeric;
    if (!is_cat && unit(rng) < 0.5) {
      const double half_width = 0.8 + 0.4 * unit(rng);
      entry.reference_range = std::make_pair(-half_width, half_width);
    }
    out.catalog.add(id, entry);
  }

  // Planted weights: the first n_relevant features drive the outcome.
  for (int i = 0; i < spec.n_relevant; ++i) {
    const double magnitude = 1.5 + unit(rng);
    const double w = (unit(rng) < 0.5 ? -1.0 : 1.0) * magnitude;
    out.oracle.relevant_features.insert(features[i]);
    out.oracle.weights[features[i]] = w;
  }

  std::vector<double> signal(spec.n_patients, 0.0);
  std::vector<double> u_mor(spec.n_patients), gap_noise(spec.n_patients),
      stay_noise(spec.n_patients);
  std::uniform_int_distribution<int> visit_count(spec.visits_per_patient.first,
                                                 spec.visits_per_patient.second);
  std::uniform_int_distribution<int> tuple_count(spec.tuples_per_visit.first,
                                                 spec.tuples_per_visit.second);
  std::uniform_int_distribution<int> any_feature(0, spec.n_features - 1);
  const char* cat_values[3] = {"mild", "moderate", "severe"};

  for (int p = 0; p < spec.n_patients; ++p) {
    PatientEHR ehr;
    ehr.patient_id = patient_name(p);
    ehr.demographics.push_back({"age", 30.0 + std::floor(unit(rng) * 60.0), 0});
    ehr.demographics.push_back({"sex", std::string(unit(rng) < 0.5 ? "female" : "male"), 0});

    // Per-patient latent value for each relevant feature; observed tuples
    // jitter around it so the last value carries the signal.
    std::vector<double> latent(spec.n_relevant);
    for (int i = 0; i < spec.n_relevant; ++i) latent[i] = gauss(rng);

    const int n_visits = visit_count(rng);
    std::map<FeatureId, double> last_seen;
    for (int v = 0; v < n_visits; ++v) {
      const std::int64_t visit_start = 1 + 24 * v;
      const int n_tuples = tuple_count(rng);
      std::vector<int> chosen;
      for (int t = 0; t < n_tuples; ++t) chosen.push_back(any_feature(rng));
      // Every relevant feature shows up in the final visit.
      if (v == n_visits - 1) {
        for (int i = 0; i < spec.n_relevant; ++i) chosen.push_back(i);
      }
      Visit visit;
      for (std::size_t t = 0; t < chosen.size(); ++t) {
        const int f = chosen[t];
        const std::int64_t ts = visit_start + static_cast<std::int64_t>(t);
        FeatureValueTuple fv;
        fv.feature = features[f];
        fv.timestamp = ts;
        if (categorical[f]) {
          fv.value = std::string(cat_values[static_cast<int>(unit(rng) * 3.0) % 3]);
        } else if (f < spec.n_relevant) {
          fv.value = latent[f] + 0.1 * gauss(rng);
        } else {
          fv.value = gauss(rng);
        }
        visit.push_back(std::move(fv));
      }
      ehr.visits.push_back(std::move(visit));
    }

    double s = 0.0;
    for (int i = 0; i < spec.n_relevant; ++i) {
      double last = latent[i];
      for (const auto& fv : flatten_tuples(ehr)) {
        if (fv.feature == features[i] && is_numeric(fv.value)) last = std::get<double>(fv.value);
      }
      s += out.oracle.weights[features[i]] * last;
    }
    s += spec.noise_sigma * gauss(rng);
    signal[p] = s;
    u_mor[p] = unit(rng);
    gap_noise[p] = gauss(rng);
    stay_noise[p] = gauss(rng);
    out.cohort.patients.push_back(std::move(ehr));
  }
  out.oracle.true_logit = signal;

  // Latent task attributes: higher planted risk shortens the readmission
  // gap and lengthens the stay.
  double mor_bias = -2.0, gap_mu = std::log(20.0), stay_mu = std::log(5.0);
  if (task_id == "mor") {
    mor_bias = bisect_shift(signal, u_mor, spec.positive_rate_target, true);
  } else if (task_id == "ra") {
    // gap = exp(gap_mu - 0.5 s + 0.4 eps); positive when gap <= 15.
    std::vector<double> gap_score(spec.n_patients);
    for (int p = 0; p < spec.n_patients; ++p) {
      gap_score[p] = -0.5 * signal[p] + 0.4 * gap_noise[p];
    }
    // Rate of gap <= 15 is monotone decreasing in gap_mu; reuse the
    // bisection on the indicator exp(mu + g) <= 15  <=>  mu <= ln15 - g.
    double lo = std::log(15.0) - 20.0, hi = std::log(15.0) + 20.0;
    auto rate = [&](double mu) {
      std::size_t hits = 0;
      for (int p = 0; p < spec.n_patients; ++p) {
        hits += (mu + gap_score[p] <= std::log(15.0)) ? 1 : 0;
      }
      return static_cast<double>(hits) / spec.n_patients;
    };
    if (rate(hi) > spec.positive_rate_target || rate(lo) < spec.positive_rate_target) {
      throw InfeasibleSpecError("cannot calibrate ra positive rate");
    }
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (rate(mid) > spec.positive_rate_target) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    gap_mu = lo;
  } else {  // los
    double lo = std::log(7.0) - 20.0, hi = std::log(7.0) + 20.0;
    std::vector<double> stay_score(spec.n_patients);
    for (int p = 0; p < spec.n_patients; ++p) {
      stay_score[p] = 0.5 * signal[p] + 0.4 * stay_noise[p];
    }
    auto rate = [&](double mu) {
      std::size_t hits = 0;
      for (int p = 0; p < spec.n_patients; ++p) {
        hits += (mu + stay_score[p] > std::log(7.0)) ? 1 : 0;
      }
      return static_cast<double>(hits) / spec.n_patients;
    };
    if (rate(lo) > spec.positive_rate_target || rate(hi) < spec.positive_rate_target) {
      throw InfeasibleSpecError("cannot calibrate los positive rate");
    }
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (rate(mid) < spec.positive_rate_target) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    stay_mu = hi;
  }

  TaskParams params;
  out.cohort.labels["mor"].resize(spec.n_patients);
  out.cohort.labels["ra"].resize(spec.n_patients);
  out.cohort.labels["los"].resize(spec.n_patients);
  for (int p = 0; p < spec.n_patients; ++p) {
    PatientEHR& ehr = out.cohort.patients[p];
    ehr.attrs["mor_logit"] = mor_bias + signal[p];
    ehr.attrs["mor_u"] = u_mor[p];
    ehr.attrs["gap_days"] = std::exp(gap_mu - 0.5 * signal[p] + 0.4 * gap_noise[p]);
    ehr.attrs["stay_days"] = std::exp(stay_mu + 0.5 * signal[p] + 0.4 * stay_noise[p]);
    out.cohort.labels["mor"][p] = label_task(ehr, "mor", params);
    out.cohort.labels["ra"][p] = label_task(ehr, "ra", params);
    out.cohort.labels["los"][p] = label_task(ehr, "los", params);
  }
  return out;
}

namespace {
double require_attr(const PatientEHR& ehr, const std::string& name, const std::string& task) {
  auto it = ehr.attrs.find(name);
  if (it == ehr.attrs.end()) {
    throw MissingAttributeError("task " + task + " needs attribute " + name + " on patient " +
                                ehr.patient_id);
  }
  return it->second;
}
}  // namespace

int label_task(const PatientEHR& ehr, const std::string& task_id, const TaskParams& params) {
  if (task_id == "mor") {
    const double logit = require_attr(ehr, "mor_logit", task_id);
    const double u = require_attr(ehr, "mor_u", task_id);
    return u < 1.0 / (1.0 + std::exp(-logit)) ? 1 : 0;
  }
  if (task_id == "ra") {
    return require_attr(ehr, "gap_days", task_id) <= params.ra_max_gap_days ? 1 : 0;
  }
  if (task_id == "los") {
    return require_attr(ehr, "stay_days", task_id) > params.los_min_days ? 1 : 0;
  }
  throw ConfigError("label_task: unknown task_id " + task_id);
}

PatientEHR truncate_for_task(const PatientEHR& ehr, const std::string& task_id,
                             const TaskParams& params) {
  if (task_id != "los") return ehr;
  PatientEHR out;
  out.patient_id = ehr.patient_id;
  out.attrs = ehr.attrs;
  for (const auto& d : ehr.demographics) {
    if (d.timestamp <= params.los_input_hours) out.demographics.push_back(d);
  }
  for (const auto& visit : ehr.visits) {
    Visit kept;
    for (const auto& fv : visit) {
      if (fv.timestamp <= params.los_input_hours) kept.push_back(fv);
    }
    if (!kept.empty()) out.visits.push_back(std::move(kept));
  }
  return out;
}

// --------------------------------------------------------------------------
// JSONL / JSON persistence

namespace {

json value_to_json(const Value& v) {
  if (is_missing(v)) return nullptr;
  if (const auto* d = std::get_if<double>(&v)) return *d;
  return std::get<std::string>(v);
}

Value value_from_json(const json& j, const std::string& path) {
  if (j.is_null()) return std::monostate{};
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) return j.get<std::string>();
  throw SchemaError(path, "value must be number, string or null");
}

json tuple_to_json(const FeatureValueTuple& fv) {
  return json::array({fv.feature, value_to_json(fv.value), fv.timestamp});
}

FeatureValueTuple tuple_from_json(const json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 3) throw SchemaError(path, "tuple must be [feature, value, t]");
  FeatureValueTuple fv;
  if (!j[0].is_string()) throw SchemaError(path + "[0]", "feature must be a string");
  fv.feature = j[0].get<std::string>();
  fv.value = value_from_json(j[1], path + "[1]");
  if (!j[2].is_number_integer() && !j[2].is_number_unsigned()) {
    throw SchemaError(path + "[2]", "timestamp must be an integer");
  }
  fv.timestamp = j[2].get<std::int64_t>();
  return fv;
}

}  // namespace

void save_cohort(const std::string& path, const Cohort& cohort) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open for write: " + path);
  for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
    const PatientEHR& p = cohort.patients[i];
    json j;
    j["patient_id"] = p.patient_id;
    json demo = json::array();
    for (const auto& d : p.demographics) demo.push_back(tuple_to_json(d));
    j["demographics"] = demo;
    json visits = json::array();
    for (const auto& visit : p.visits) {
      json vj = json::array();
      for (const auto& fv : visit) vj.push_back(tuple_to_json(fv));
      visits.push_back(vj);
    }
    j["visits"] = visits;
    json labels = json::object();
    for (const auto& [task, ys] : cohort.labels) labels[task] = ys.at(i);
    j["labels"] = labels;
    if (!p.attrs.empty()) {
      json attrs = json::object();
      for (const auto& [k, v] : p.attrs) attrs[k] = v;
      j["attrs"] = attrs;
    }
    os << j.dump() << "\n";
  }
  if (!os) throw Error("write failed: " + path);
}

Cohort load_cohort(const std::string& path, const std::vector<std::string>& required_tasks) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError(path);
  Cohort cohort;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(line_no, e.what());
    }
    PatientEHR p;
    if (!j.contains("patient_id") || !j["patient_id"].is_string()) {
      throw SchemaError("patient_id", "missing or not a string (line " + std::to_string(line_no) +
                                          ")");
    }
    p.patient_id = j["patient_id"].get<std::string>();
    if (!j.contains("demographics") || !j["demographics"].is_array()) {
      throw SchemaError("demographics", "missing or not an array (line " +
                                            std::to_string(line_no) + ")");
    }
    for (std::size_t i = 0; i < j["demographics"].size(); ++i) {
      p.demographics.push_back(
          tuple_from_json(j["demographics"][i], "demographics[" + std::to_string(i) + "]"));
    }
    if (!j.contains("visits") || !j["visits"].is_array()) {
      throw SchemaError("visits", "missing or not an array (line " + std::to_string(line_no) + ")");
    }
    for (std::size_t v = 0; v < j["visits"].size(); ++v) {
      const auto& vj = j["visits"][v];
      if (!vj.is_array()) throw SchemaError("visits[" + std::to_string(v) + "]", "must be an array");
      Visit visit;
      for (std::size_t i = 0; i < vj.size(); ++i) {
        visit.push_back(tuple_from_json(
            vj[i], "visits[" + std::to_string(v) + "][" + std::to_string(i) + "]"));
      }
      p.visits.push_back(std::move(visit));
    }
    if (j.contains("attrs")) {
      for (const auto& [k, v] : j["attrs"].items()) {
        if (!v.is_number()) throw SchemaError("attrs." + k, "must be a number");
        p.attrs[k] = v.get<double>();
      }
    }
    if (!j.contains("labels") || !j["labels"].is_object()) {
      throw SchemaError("labels", "missing or not an object (line " + std::to_string(line_no) +
                                      ")");
    }
    const std::size_t index = cohort.patients.size();
    for (const auto& [task, y] : j["labels"].items()) {
      if (!y.is_number_integer() && !y.is_number_unsigned()) {
        throw SchemaError("labels." + task, "label must be 0/1");
      }
      const int yi = y.get<int>();
      if (yi != 0 && yi != 1) throw SchemaError("labels." + task, "label must be 0/1");
      auto& vec = cohort.labels[task];
      vec.resize(index, 0);  // tasks absent on earlier lines default-fill
      vec.push_back(yi);
    }
    for (const auto& task : required_tasks) {
      if (!j["labels"].contains(task)) {
        throw SchemaError("labels." + task,
                          "missing for patient " + p.patient_id + " (line " +
                              std::to_string(line_no) + ")");
      }
    }
    cohort.patients.push_back(std::move(p));
  }
  for (auto& [task, vec] : cohort.labels) vec.resize(cohort.patients.size(), 0);
  return cohort;
}

void save_catalog(const std::string& path, const FeatureCatalog& catalog) {
  json j = json::object();
  for (const auto& [id, entry] : catalog.entries()) {
    json e;
    e["display_name"] = entry.display_name;
    e["modality"] = modality_name(entry.modality);
    e["value_kind"] = value_kind_name(entry.value_kind);
    if (entry.reference_range) {
      e["reference_range"] = json::array({entry.reference_range->first,
                                          entry.reference_range->second});
    }
    j[id] = e;
  }
  std::ofstream os(path);
  if (!os) throw Error("cannot open for write: " + path);
  os << j.dump(2) << "\n";
}

FeatureCatalog load_catalog(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError(path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ParseError(1, std::string("catalog: ") + e.what());
  }
  if (!j.is_object()) throw SchemaError("<root>", "catalog must be an object");
  FeatureCatalog catalog;
  for (const auto& [id, e] : j.items()) {
    CatalogEntry entry;
    if (!e.contains("display_name")) throw SchemaError(id + ".display_name", "missing");
    entry.display_name = e["display_name"].get<std::string>();
    if (!e.contains("modality")) throw SchemaError(id + ".modality", "missing");
    entry.modality = modality_from_name(e["modality"].get<std::string>());
    if (!e.contains("value_kind")) throw SchemaError(id + ".value_kind", "missing");
    entry.value_kind = value_kind_from_name(e["value_kind"].get<std::string>());
    if (e.contains("reference_range")) {
      const auto& r = e["reference_range"];
      if (!r.is_array() || r.size() != 2) {
        throw SchemaError(id + ".reference_range", "must be [min, max]");
      }
      entry.reference_range = std::make_pair(r[0].get<double>(), r[1].get<double>());
    }
    catalog.add(id, entry);
  }
  return catalog;
}

}  // namespace ehrw
