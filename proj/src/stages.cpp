#include "ehrw/stages.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"

#include "ehrw/rng.hpp"

namespace ehrw {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string> kStageNames = {
    "gen-data",     "build-rewrites", "train-scorer", "build-drw", "train-rewriter",
    "train-predictor", "kl-align",    "inoculate",    "evaluate",  "sweep",
};

std::string RunConfig::resolved_cohort_path() const {
  return cohort_path.empty() ? workdir + "/cohort.jsonl" : cohort_path;
}
std::string RunConfig::resolved_catalog_path() const {
  return catalog_path.empty() ? workdir + "/catalog.json" : catalog_path;
}

namespace {

double get_or(const json& j, const char* key, double fallback) {
  return j.contains(key) ? j.at(key).get<double>() : fallback;
}
int get_or(const json& j, const char* key, int fallback) {
  return j.contains(key) ? j.at(key).get<int>() : fallback;
}
std::string get_or(const json& j, const char* key, const std::string& fallback) {
  return j.contains(key) ? j.at(key).get<std::string>() : fallback;
}

}  // namespace

RunConfig RunConfig::from_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError(path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }

  RunConfig cfg;
  cfg.workdir = get_or(j, "workdir", cfg.workdir);
  cfg.cohort_path = get_or(j, "cohort", std::string());
  cfg.catalog_path = get_or(j, "catalog", std::string());
  cfg.exp.task_id = get_or(j, "task", cfg.exp.task_id);
  if (j.contains("pseudo_tasks")) {
    cfg.exp.pseudo_tasks = j.at("pseudo_tasks").get<std::vector<std::string>>();
  }
  cfg.mode = mode_from_name(get_or(j, "mode", std::string("full")));
  const std::uint64_t seed =
      j.contains("seed") ? j.at("seed").get<std::uint64_t>() : cfg.exp.seed;
  cfg.exp.seed = seed;
  cfg.cohort_spec.seed = seed;

  if (j.contains("cohort_spec")) {
    const json& c = j.at("cohort_spec");
    cfg.cohort_spec.n_patients = get_or(c, "n_patients", cfg.cohort_spec.n_patients);
    cfg.cohort_spec.n_features = get_or(c, "n_features", cfg.cohort_spec.n_features);
    cfg.cohort_spec.n_relevant = get_or(c, "n_relevant", cfg.cohort_spec.n_relevant);
    cfg.cohort_spec.positive_rate_target =
        get_or(c, "positive_rate", cfg.cohort_spec.positive_rate_target);
    if (c.contains("visits_per_patient")) {
      cfg.cohort_spec.visits_per_patient = {c.at("visits_per_patient").at(0).get<int>(),
                                            c.at("visits_per_patient").at(1).get<int>()};
    }
    if (c.contains("tuples_per_visit")) {
      cfg.cohort_spec.tuples_per_visit = {c.at("tuples_per_visit").at(0).get<int>(),
                                          c.at("tuples_per_visit").at(1).get<int>()};
    }
    cfg.cohort_spec.noise_sigma = get_or(c, "noise_sigma", cfg.cohort_spec.noise_sigma);
  }
  if (j.contains("operator")) {
    const json& o = j.at("operator");
    cfg.exp.op_config.x_percent = get_or(o, "x_percent", cfg.exp.op_config.x_percent);
    cfg.exp.op_config.top_fill = get_or(o, "top_fill", cfg.exp.op_config.top_fill);
    cfg.exp.op_config.mi_bins = get_or(o, "mi_bins", cfg.exp.op_config.mi_bins);
    cfg.exp.op_config.rfe_step_fraction =
        get_or(o, "rfe_step_fraction", cfg.exp.op_config.rfe_step_fraction);
  }
  cfg.exp.scorer_fraction = get_or(j, "scorer_fraction", cfg.exp.scorer_fraction);
  cfg.exp.k_percent = get_or(j, "k_percent", cfg.exp.k_percent);
  cfg.exp.policy_rewrites_per_patient =
      get_or(j, "policy_rewrites_per_patient", cfg.exp.policy_rewrites_per_patient);
  if (j.contains("train")) {
    const json& t = j.at("train");
    cfg.exp.predictor_train.learning_rate =
        get_or(t, "learning_rate", cfg.exp.predictor_train.learning_rate);
    cfg.exp.predictor_train.epochs = get_or(t, "epochs", cfg.exp.predictor_train.epochs);
    cfg.exp.predictor_train.patience = get_or(t, "patience", cfg.exp.predictor_train.patience);
    cfg.exp.predictor_train.batch_size =
        get_or(t, "batch_size", cfg.exp.predictor_train.batch_size);
  }
  cfg.exp.hash_dim = static_cast<std::uint32_t>(get_or(j, "hash_dim", 1 << 16));
  cfg.exp.hidden_units = get_or(j, "hidden_units", cfg.exp.hidden_units);
  if (j.contains("mle")) {
    const json& m = j.at("mle");
    cfg.exp.mle.learning_rate = get_or(m, "learning_rate", cfg.exp.mle.learning_rate);
    cfg.exp.mle.epochs = get_or(m, "epochs", cfg.exp.mle.epochs);
    cfg.exp.mle.batch_size = get_or(m, "batch_size", cfg.exp.mle.batch_size);
  }
  if (j.contains("alignment")) {
    const json& a = j.at("alignment");
    cfg.exp.align.tau = get_or(a, "tau", cfg.exp.align.tau);
    cfg.exp.align.kappa = get_or(a, "kappa", cfg.exp.align.kappa);
    cfg.exp.align.lambda_mix = get_or(a, "lambda", cfg.exp.align.lambda_mix);
    cfg.exp.align.n_i = get_or(a, "n_i", cfg.exp.align.n_i);
    cfg.exp.align.max_steps = get_or(a, "max_steps", cfg.exp.align.max_steps);
    cfg.exp.align.eval_every = get_or(a, "eval_every", cfg.exp.align.eval_every);
    cfg.exp.align.learning_rate = get_or(a, "learning_rate", cfg.exp.align.learning_rate);
    cfg.exp.align.batch_size = get_or(a, "batch_size", cfg.exp.align.batch_size);
  }
  if (j.contains("inference")) {
    const json& i = j.at("inference");
    if (i.contains("alpha") && !i.at("alpha").is_null()) {
      cfg.exp.alpha = i.at("alpha").get<double>();
    }
    cfg.exp.n_rewrites = get_or(i, "n_rewrites", cfg.exp.n_rewrites);
  }
  cfg.exp.n_bootstrap = get_or(j, "n_bootstrap", cfg.exp.n_bootstrap);
  if (j.contains("bucket_edges")) {
    cfg.exp.bucket_edges = j.at("bucket_edges").get<std::vector<std::size_t>>();
  }
  cfg.exp.train_frac = get_or(j, "train_frac", cfg.exp.train_frac);
  cfg.exp.val_frac = get_or(j, "val_frac", cfg.exp.val_frac);
  return cfg;
}

std::string RunConfig::to_json_string() const {
  json j;
  j["workdir"] = workdir;
  j["cohort"] = cohort_path;
  j["catalog"] = catalog_path;
  j["task"] = exp.task_id;
  j["pseudo_tasks"] = exp.effective_pseudo_tasks();
  j["mode"] = mode_name(mode);
  j["seed"] = exp.seed;
  j["cohort_spec"] = {{"n_patients", cohort_spec.n_patients},
                      {"n_features", cohort_spec.n_features},
                      {"n_relevant", cohort_spec.n_relevant},
                      {"positive_rate", cohort_spec.positive_rate_target},
                      {"visits_per_patient",
                       {cohort_spec.visits_per_patient.first, cohort_spec.visits_per_patient.second}},
                      {"tuples_per_visit",
                       {cohort_spec.tuples_per_visit.first, cohort_spec.tuples_per_visit.second}},
                      {"noise_sigma", cohort_spec.noise_sigma}};
  j["operator"] = {{"x_percent", exp.op_config.x_percent},
                   {"top_fill", exp.op_config.top_fill},
                   {"mi_bins", exp.op_config.mi_bins},
                   {"rfe_step_fraction", exp.op_config.rfe_step_fraction}};
  j["scorer_fraction"] = exp.scorer_fraction;
  j["k_percent"] = exp.k_percent;
  j["policy_rewrites_per_patient"] = exp.policy_rewrites_per_patient;
  j["train"] = {{"learning_rate", exp.predictor_train.learning_rate},
                {"epochs", exp.predictor_train.epochs},
                {"patience", exp.predictor_train.patience},
                {"batch_size", exp.predictor_train.batch_size}};
  j["hash_dim"] = exp.hash_dim;
  j["hidden_units"] = exp.hidden_units;
  j["mle"] = {{"learning_rate", exp.mle.learning_rate},
              {"epochs", exp.mle.epochs},
              {"batch_size", exp.mle.batch_size}};
  j["alignment"] = {{"tau", exp.align.tau},
                    {"kappa", exp.align.kappa},
                    {"lambda", exp.align.lambda_mix},
                    {"n_i", exp.align.n_i},
                    {"max_steps", exp.align.max_steps},
                    {"eval_every", exp.align.eval_every},
                    {"learning_rate", exp.align.learning_rate},
                    {"batch_size", exp.align.batch_size}};
  j["inference"] = {{"alpha", exp.alpha ? json(*exp.alpha) : json(nullptr)},
                    {"n_rewrites", exp.n_rewrites}};
  j["n_bootstrap"] = exp.n_bootstrap;
  j["bucket_edges"] = exp.bucket_edges;
  j["train_frac"] = exp.train_frac;
  j["val_frac"] = exp.val_frac;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Artifact plumbing

namespace {

struct WorkdirLock {
  std::string path;
  int fd = -1;
  explicit WorkdirLock(const std::string& workdir) : path(workdir + "/.lock") {
    fd = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      throw ConfigError("workdir is locked by another stage (remove " + path +
                        " if that run crashed)");
    }
  }
  ~WorkdirLock() {
    if (fd >= 0) {
      ::close(fd);
      ::unlink(path.c_str());
    }
  }
};

std::string file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) return "missing";
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

void require_artifact(const std::string& path) {
  if (!fs::exists(path)) throw MissingArtifactError(path);
}

std::string config_hash(const RunConfig& cfg) {
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(fnv1a64(cfg.to_json_string())));
  return hex;
}

struct StageIo {
  const RunConfig& cfg;
  std::string stage;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;

  std::string manifest_path() const {
    return cfg.workdir + "/manifest_" + stage + ".json";
  }

  bool up_to_date() const {
    std::ifstream is(manifest_path());
    if (!is) return false;
    json m;
    try {
      is >> m;
    } catch (const json::exception&) {
      return false;
    }
    if (m.value("config_hash", "") != config_hash(cfg)) return false;
    if (!m.contains("inputs")) return false;
    for (const auto& path : inputs) {
      if (!m["inputs"].contains(path) || m["inputs"][path] != file_hash(path)) return false;
    }
    for (const auto& path : outputs) {
      if (!fs::exists(path)) return false;
    }
    return true;
  }

  void check_inputs() const {
    for (const auto& path : inputs) require_artifact(path);
  }

  void write_manifest(double wall_time_sec) const {
    json m;
    m["stage"] = stage;
    m["config_hash"] = config_hash(cfg);
    m["seed"] = cfg.exp.seed;
    json in = json::object();
    for (const auto& path : inputs) in[path] = file_hash(path);
    m["inputs"] = in;
    m["outputs"] = outputs;
    m["wall_time_sec"] = wall_time_sec;
    std::ofstream os(manifest_path());
    os << m.dump(2) << "\n";
  }
};

std::string path_in(const RunConfig& cfg, const std::string& name) {
  return cfg.workdir + "/" + name;
}

// ---- serialization helpers ----

json rewrite_to_json(const Rewrite& rw) {
  json j;
  j["patient_id"] = rw.patient_id;
  j["provenance"] = rw.provenance;
  j["kept"] = rw.kept;
  if (rw.logprob) j["logprob"] = *rw.logprob;
  return j;
}

Rewrite rewrite_from_json(const json& j) {
  Rewrite rw;
  rw.patient_id = j.at("patient_id").get<std::string>();
  rw.provenance = j.at("provenance").get<std::string>();
  rw.kept = j.at("kept").get<std::vector<std::uint32_t>>();
  if (j.contains("logprob")) rw.logprob = j.at("logprob").get<double>();
  return rw;
}

void save_rewrite_set(const std::string& path, const CandidateRewriteSet& set) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open for write: " + path);
  for (const auto& item : set.items) {
    json j;
    j["patient_index"] = item.patient_index;
    j["patient_id"] = item.patient_id;
    json rewrites = json::array();
    for (const auto& rw : item.rewrites) rewrites.push_back(rewrite_to_json(rw));
    j["rewrites"] = rewrites;
    os << j.dump() << "\n";
  }
}

CandidateRewriteSet load_rewrite_set(const std::string& path, const std::string& task_id) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError(path);
  CandidateRewriteSet set;
  set.task_id = task_id;
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
    CandidateRewriteSet::PatientCandidates item;
    item.patient_index = j.at("patient_index").get<std::uint32_t>();
    item.patient_id = j.at("patient_id").get<std::string>();
    const auto& rewrites = j.at("rewrites");
    if (rewrites.size() != kNumOperators) {
      throw SchemaError("rewrites", "expected " + std::to_string(kNumOperators) + " entries");
    }
    for (int op = 0; op < kNumOperators; ++op) {
      item.rewrites[op] = rewrite_from_json(rewrites[op]);
    }
    set.items.push_back(std::move(item));
  }
  return set;
}

void save_score_tables(const std::string& path,
                       const std::map<OperatorId, FeatureScoreTable>& tables,
                       const OperatorConfig& config) {
  json j = json::object();
  for (const auto& [op, table] : tables) {
    json t;
    t["method"] = operator_name(op);
    json scores = json::object();
    for (const auto& [f, s] : table.scores) scores[f] = s;
    t["scores"] = scores;
    t["config"] = {{"x_percent", config.x_percent},
                   {"top_fill", config.top_fill},
                   {"mi_bins", config.mi_bins},
                   {"rfe_step_fraction", config.rfe_step_fraction},
                   {"rng_seed", config.rng_seed}};
    j[operator_name(op)] = t;
  }
  std::ofstream os(path);
  os << j.dump(2) << "\n";
}

void save_splits(const std::string& path, const Split& split) {
  json j;
  j["train"] = split.train;
  j["val"] = split.val;
  j["test"] = split.test;
  std::ofstream os(path);
  os << j.dump() << "\n";
}

Split load_splits(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError(path);
  json j;
  is >> j;
  Split split;
  split.train = j.at("train").get<std::vector<std::uint32_t>>();
  split.val = j.at("val").get<std::vector<std::uint32_t>>();
  split.test = j.at("test").get<std::vector<std::uint32_t>>();
  return split;
}

void save_drw(const std::string& path, const std::string& meta_path,
              const PseudoLabelDataset& drw) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open for write: " + path);
  for (const auto& e : drw.entries) {
    json j;
    j["task"] = e.source_task;
    j["patient_id"] = e.original.patient_id;
    j["rewrite"] = rewrite_to_json(e.rewrite);
    os << j.dump() << "\n";
  }
  json meta;
  meta["k_percent"] = drw.k_percent;
  json tau = json::object();
  for (const auto& [task, t] : drw.tau_per_task) tau[task] = t;
  meta["tau_per_task"] = tau;
  std::ofstream ms(meta_path);
  ms << meta.dump(2) << "\n";
}

PseudoLabelDataset load_drw(const std::string& path, const std::string& meta_path,
                            const std::map<std::string, TaskView>& views) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError(path);
  PseudoLabelDataset drw;
  std::map<std::string, std::map<std::string, const PatientEHR*>> by_id;
  for (const auto& [task, view] : views) {
    for (const auto& p : view.patients) by_id[task][p.patient_id] = &p;
  }
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
    PseudoLabelDataset::Entry entry;
    entry.source_task = j.at("task").get<std::string>();
    const std::string pid = j.at("patient_id").get<std::string>();
    auto task_it = by_id.find(entry.source_task);
    if (task_it == by_id.end() || !task_it->second.count(pid)) {
      throw SchemaError("patient_id", "unknown patient " + pid + " for task " + entry.source_task);
    }
    entry.original = *task_it->second.at(pid);
    entry.rewrite = rewrite_from_json(j.at("rewrite"));
    drw.entries.push_back(std::move(entry));
  }
  std::ifstream ms(meta_path);
  if (ms) {
    json meta;
    ms >> meta;
    drw.k_percent = meta.value("k_percent", 0.0);
    if (meta.contains("tau_per_task")) {
      for (const auto& [task, t] : meta.at("tau_per_task").items()) {
        drw.tau_per_task[task] = t.get<double>();
      }
    }
  }
  return drw;
}

void save_oracle(const std::string& path, const OracleInfo& oracle) {
  json j;
  j["relevant_features"] = std::vector<FeatureId>(oracle.relevant_features.begin(),
                                                  oracle.relevant_features.end());
  json w = json::object();
  for (const auto& [f, v] : oracle.weights) w[f] = v;
  j["weights"] = w;
  j["true_logit"] = oracle.true_logit;
  std::ofstream os(path);
  os << j.dump() << "\n";
}

void save_training_log(const std::string& path, const std::vector<KlTrainLogRow>& log) {
  std::ofstream os(path);
  for (const auto& row : log) {
    json j;
    j["step"] = row.step;
    j["total_loss"] = row.total_loss;
    j["llm_loss"] = row.llm_loss;
    j["kl_loss"] = row.kl_loss;
    j["val_auroc"] = row.val_auroc ? json(*row.val_auroc) : json(nullptr);
    os << j.dump() << "\n";
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

json report_to_json(const MetricReport& r) {
  json j;
  j["auroc"] = r.auroc;
  j["auprc"] = r.auprc;
  j["auroc_std"] = r.auroc_std;
  j["auprc_std"] = r.auprc_std;
  j["auroc_point"] = r.auroc_point;
  j["auprc_point"] = r.auprc_point;
  j["n_bootstrap"] = r.n_bootstrap;
  j["bootstrap_skipped"] = r.bootstrap_skipped;
  json strata = json::object();
  for (const auto& [name, m] : r.strata) {
    json s;
    s["count"] = m.count;
    s["degenerate"] = m.degenerate;
    s["auroc"] = m.auroc ? json(*m.auroc) : json(nullptr);
    s["auprc"] = m.auprc ? json(*m.auprc) : json(nullptr);
    strata[name] = s;
  }
  j["strata"] = strata;
  return j;
}

// Cohort context shared by most stages.
struct LoadedRun {
  Cohort cohort;
  FeatureCatalog catalog;
  Split split;
  std::map<std::string, TaskView> views;

  const TaskView& view(const std::string& task) const { return views.at(task); }
};

LoadedRun load_run(const RunConfig& cfg, bool need_split) {
  LoadedRun run;
  run.catalog = load_catalog(cfg.resolved_catalog_path());
  run.cohort = load_cohort(cfg.resolved_cohort_path(), {cfg.exp.task_id});
  if (need_split) run.split = load_splits(path_in(cfg, "splits.json"));
  for (const auto& task : cfg.exp.effective_pseudo_tasks()) {
    run.views.emplace(task, make_task_view(run.cohort, task));
  }
  if (!run.views.count(cfg.exp.task_id)) {
    run.views.emplace(cfg.exp.task_id, make_task_view(run.cohort, cfg.exp.task_id));
  }
  return run;
}

std::vector<Example> originals_of(const TaskView& view, const std::vector<std::uint32_t>& ids,
                                  const FeatureCatalog& catalog) {
  std::vector<Example> out;
  out.reserve(ids.size());
  for (std::uint32_t id : ids) {
    out.emplace_back(verbalize(view.patients.at(id), catalog).text, view.labels.at(id));
  }
  return out;
}

// ---- stage bodies ----

void stage_gen_data(const RunConfig& cfg) {
  const GeneratedCohort gen = generate_cohort(cfg.cohort_spec, cfg.exp.task_id);
  save_cohort(cfg.resolved_cohort_path(), gen.cohort);
  save_catalog(cfg.resolved_catalog_path(), gen.catalog);
  save_oracle(path_in(cfg, "oracle.json"), gen.oracle);
}

void stage_build_rewrites(const RunConfig& cfg) {
  LoadedRun run = load_run(cfg, /*need_split=*/false);
  run.split = split_cohort(run.cohort.patients.size(), cfg.exp.train_frac, cfg.exp.val_frac,
                           stage_seed(cfg.exp, "split"));
  assert_no_leakage(run.split.train, run.split);
  save_splits(path_in(cfg, "splits.json"), run.split);

  for (const auto& task : cfg.exp.effective_pseudo_tasks()) {
    OperatorConfig op_cfg = cfg.exp.op_config;
    op_cfg.rng_seed = stage_seed(cfg.exp, "ops:" + task);
    std::map<OperatorId, FeatureScoreTable> tables;
    const CandidateRewriteSet set =
        build_candidate_rewrites(run.view(task), run.split.train, run.catalog, op_cfg, &tables);
    save_rewrite_set(path_in(cfg, "rewrites_" + task + ".jsonl"), set);
    save_score_tables(path_in(cfg, "score_tables_" + task + ".json"), tables, op_cfg);
  }
}

void stage_train_scorer(const RunConfig& cfg) {
  LoadedRun run = load_run(cfg, /*need_split=*/true);
  for (const auto& task : cfg.exp.effective_pseudo_tasks()) {
    const CandidateRewriteSet set =
        load_rewrite_set(path_in(cfg, "rewrites_" + task + ".jsonl"), task);
    TrainConfig scorer_cfg = cfg.exp.predictor_train;
    scorer_cfg.rng_seed = stage_seed(cfg.exp, "scorer:" + task);
    const std::vector<Example> subset = build_scorer_subset(
        run.view(task), set, run.catalog, cfg.exp.scorer_fraction, scorer_cfg.rng_seed);
    const PredictorModel scorer =
        train(subset, scorer_cfg, originals_of(run.view(task), run.split.val, run.catalog),
              cfg.exp.hash_dim, cfg.exp.hidden_units);
    scorer.save(path_in(cfg, "scorer_" + task + ".bin"));
  }
}

void stage_build_drw(const RunConfig& cfg) {
  LoadedRun run = load_run(cfg, /*need_split=*/true);
  PseudoLabelDataset drw;
  if (cfg.mode == AblationMode::NoDrw) {
    RewriterPolicy policy_init;
    policy_init.rng_seed = stage_seed(cfg.exp, "policy");
    const std::uint64_t seed = stage_seed(cfg.exp, "drw");
    drw.k_percent = 0.0;
    for (const auto& task : cfg.exp.effective_pseudo_tasks()) {
      const TaskView& view = run.view(task);
      for (std::uint32_t id : run.split.train) {
        const PatientEHR& source = view.patients.at(id);
        const auto samples =
            sample_rewrites(policy_init, source, run.catalog, cfg.exp.no_drw_samples,
                            derive_seed(seed, source.patient_id + ":" + task, 4));
        for (const auto& rw : samples) drw.entries.push_back({source, rw, task});
      }
    }
  } else {
    std::map<std::string, CandidateRewriteSet> sets;
    std::map<std::string, PredictorModel> scorers;
    std::map<std::string, const CandidateRewriteSet*> set_ptrs;
    std::map<std::string, const TaskView*> view_ptrs;
    std::map<std::string, const PredictorModel*> scorer_ptrs;
    for (const auto& task : cfg.exp.effective_pseudo_tasks()) {
      sets[task] = load_rewrite_set(path_in(cfg, "rewrites_" + task + ".jsonl"), task);
      scorers[task] = PredictorModel::load(path_in(cfg, "scorer_" + task + ".bin"));
      set_ptrs[task] = &sets[task];
      view_ptrs[task] = &run.view(task);
      scorer_ptrs[task] = &scorers[task];
    }
    drw = select_pseudolabels(set_ptrs, view_ptrs, scorer_ptrs, run.catalog, cfg.exp.k_percent);
  }
  save_drw(path_in(cfg, "drw.jsonl"), path_in(cfg, "drw_meta.json"), drw);
}

void stage_train_rewriter(const RunConfig& cfg) {
  RewriterPolicy policy_init;
  policy_init.rng_seed = stage_seed(cfg.exp, "policy");
  if (cfg.mode == AblationMode::NoRewriter) {
    policy_init.save(path_in(cfg, "rewriter_mle.json"));
    return;
  }
  LoadedRun run = load_run(cfg, /*need_split=*/false);
  const PseudoLabelDataset drw =
      load_drw(path_in(cfg, "drw.jsonl"), path_in(cfg, "drw_meta.json"), run.views);
  MleConfig mle_cfg = cfg.exp.mle;
  mle_cfg.rng_seed = stage_seed(cfg.exp, "mle");
  const RewriterPolicy policy = mle_finetune(policy_init, drw.mask_pairs(), run.catalog, mle_cfg);
  policy.save(path_in(cfg, "rewriter_mle.json"));
}

void stage_train_predictor(const RunConfig& cfg) {
  LoadedRun run = load_run(cfg, /*need_split=*/true);
  const TaskView& view = run.view(cfg.exp.task_id);
  const CandidateRewriteSet set =
      load_rewrite_set(path_in(cfg, "rewrites_" + cfg.exp.task_id + ".jsonl"), cfg.exp.task_id);
  const RewriterPolicy policy = RewriterPolicy::load(path_in(cfg, "rewriter_mle.json"));

  const AugmentedDataset augmented =
      build_augmented(view, run.split.train, set, policy, cfg.exp.policy_rewrites_per_patient,
                      run.catalog, stage_seed(cfg.exp, "augment"));
  {
    std::ofstream os(path_in(cfg, "augmented.jsonl"));
    for (const auto& e : augmented.entries) {
      json j;
      j["text"] = e.text;
      j["label"] = e.label;
      j["origin"] = origin_name(e.origin);
      j["patient_id"] = e.patient_id;
      os << j.dump() << "\n";
    }
  }
  TrainConfig pred_cfg = cfg.exp.predictor_train;
  pred_cfg.rng_seed = stage_seed(cfg.exp, "predictor");
  const PredictorModel predictor =
      train(augmented.examples(), pred_cfg, originals_of(view, run.split.val, run.catalog),
            cfg.exp.hash_dim, cfg.exp.hidden_units);
  predictor.save(path_in(cfg, "predictor.bin"));
}

void stage_kl_align(const RunConfig& cfg) {
  const RewriterPolicy policy_mle = RewriterPolicy::load(path_in(cfg, "rewriter_mle.json"));
  if (cfg.mode == AblationMode::NoKl) {
    policy_mle.save(path_in(cfg, "rewriter_aligned.json"));
    save_training_log(path_in(cfg, "training_log.jsonl"), {});
    return;
  }
  LoadedRun run = load_run(cfg, /*need_split=*/true);
  const TaskView& view = run.view(cfg.exp.task_id);
  const PredictorModel predictor = PredictorModel::load(path_in(cfg, "predictor.bin"));
  const DualDataset dual = build_dual(view, run.split.train, policy_mle, cfg.exp.align.n_i,
                                      run.catalog, stage_seed(cfg.exp, "dual"));
  AlignmentConfig align_cfg = cfg.exp.align;
  align_cfg.rng_seed = stage_seed(cfg.exp, "kl");
  const KlTrainResult result =
      kl_train(policy_mle, predictor, dual, view, run.split.val, run.catalog, align_cfg);
  result.policy.save(path_in(cfg, "rewriter_aligned.json"));
  save_training_log(path_in(cfg, "training_log.jsonl"), result.log);
}

void stage_inoculate(const RunConfig& cfg) {
  LoadedRun run = load_run(cfg, /*need_split=*/true);
  const TaskView& view = run.view(cfg.exp.task_id);
  const PredictorModel predictor = PredictorModel::load(path_in(cfg, "predictor.bin"));
  const RewriterPolicy policy = RewriterPolicy::load(path_in(cfg, "rewriter_aligned.json"));

  std::vector<std::uint32_t> sorted_ids = run.split.train;
  std::sort(sorted_ids.begin(), sorted_ids.end(), [&](std::uint32_t a, std::uint32_t b) {
    return view.patients.at(a).patient_id < view.patients.at(b).patient_id;
  });
  const std::uint64_t inoc_seed = stage_seed(cfg.exp, "inoculate");
  std::vector<Example> inoc;
  for (std::uint32_t id : sorted_ids) {
    const PatientEHR& source = view.patients.at(id);
    const auto samples = sample_rewrites(policy, source, run.catalog, 1,
                                         derive_seed(inoc_seed, source.patient_id, 5));
    inoc.emplace_back(verbalize(rewrite_to_ehr(source, samples.front()), run.catalog).text,
                      view.labels.at(id));
  }
  {
    std::ofstream os(path_in(cfg, "inoculation.jsonl"));
    for (const auto& [text, label] : inoc) {
      json j;
      j["text"] = text;
      j["label"] = label;
      os << j.dump() << "\n";
    }
  }
  TrainConfig inoc_cfg = cfg.exp.predictor_train;
  inoc_cfg.rng_seed = inoc_seed;
  const PredictorModel final_model =
      inoculate(predictor, inoc, inoc_cfg, cfg.exp.inoculate_lr_scale, cfg.exp.inoculate_max);
  final_model.save(path_in(cfg, "predictor_final.bin"));
}

MetricReport evaluate_with(const RunConfig& cfg, const LoadedRun& run,
                           const PredictorModel& predictor, const RewriterPolicy& policy,
                           double alpha) {
  InferenceConfig infer;
  infer.alpha = alpha;
  infer.n_rewrites = cfg.exp.n_rewrites;
  infer.seed = stage_seed(cfg.exp, "eval");
  return evaluate_ids(predictor, policy, run.view(cfg.exp.task_id), run.split.test, run.catalog,
                      infer, cfg.exp.n_bootstrap, cfg.exp.bucket_edges,
                      stage_seed(cfg.exp, "bootstrap"));
}

void stage_evaluate(const RunConfig& cfg) {
  LoadedRun run = load_run(cfg, /*need_split=*/true);
  const PredictorModel predictor = PredictorModel::load(path_in(cfg, "predictor_final.bin"));
  const RewriterPolicy policy = RewriterPolicy::load(path_in(cfg, "rewriter_aligned.json"));

  const double alpha =
      cfg.exp.alpha ? *cfg.exp.alpha
                    : sweep_alpha_on_validation(predictor, policy, run.view(cfg.exp.task_id),
                                                run.split.val, run.catalog, cfg.exp.n_rewrites,
                                                stage_seed(cfg.exp, "alpha_sweep"));
  const MetricReport report = evaluate_with(cfg, run, predictor, policy, alpha);

  json j = report_to_json(report);
  j["task"] = cfg.exp.task_id;
  j["mode"] = mode_name(cfg.mode);
  j["alpha"] = alpha;
  j["lambda"] = cfg.exp.align.lambda_mix;
  std::ofstream os(path_in(cfg, "metrics.json"));
  os << j.dump(2) << "\n";

  std::ofstream cs(path_in(cfg, "metrics.csv"));
  cs << metrics_csv({cfg.exp.task_id}, {mode_name(cfg.mode)}, {alpha},
                    {cfg.exp.align.lambda_mix}, {report}, cfg.exp.bucket_edges);
}

void stage_sweep(const RunConfig& cfg, const std::string& variant) {
  LoadedRun run = load_run(cfg, /*need_split=*/true);
  const TaskView& view = run.view(cfg.exp.task_id);

  std::vector<std::string> tasks, modes;
  std::vector<double> alphas, lambdas;
  std::vector<MetricReport> reports;

  if (variant == "alpha") {
    const PredictorModel predictor = PredictorModel::load(path_in(cfg, "predictor_final.bin"));
    const RewriterPolicy policy = RewriterPolicy::load(path_in(cfg, "rewriter_aligned.json"));
    for (double alpha : alpha_grid()) {
      reports.push_back(evaluate_with(cfg, run, predictor, policy, alpha));
      tasks.push_back(cfg.exp.task_id);
      modes.push_back(mode_name(cfg.mode));
      alphas.push_back(alpha);
      lambdas.push_back(cfg.exp.align.lambda_mix);
    }
    std::ofstream os(path_in(cfg, "sweep_alpha.csv"));
    os << metrics_csv(tasks, modes, alphas, lambdas, reports, cfg.exp.bucket_edges);
    return;
  }
  if (variant != "lambda") throw ConfigError("sweep must be 'alpha' or 'lambda'");

  const PredictorModel predictor = PredictorModel::load(path_in(cfg, "predictor.bin"));
  const RewriterPolicy policy_mle = RewriterPolicy::load(path_in(cfg, "rewriter_mle.json"));
  const DualDataset dual = build_dual(view, run.split.train, policy_mle, cfg.exp.align.n_i,
                                      run.catalog, stage_seed(cfg.exp, "dual"));
  for (double lambda : lambda_grid()) {
    AlignmentConfig align_cfg = cfg.exp.align;
    align_cfg.lambda_mix = lambda;
    align_cfg.rng_seed = stage_seed(cfg.exp, "kl");
    const KlTrainResult result =
        kl_train(policy_mle, predictor, dual, view, run.split.val, run.catalog, align_cfg);

    std::vector<std::uint32_t> sorted_ids = run.split.train;
    std::sort(sorted_ids.begin(), sorted_ids.end(), [&](std::uint32_t a, std::uint32_t b) {
      return view.patients.at(a).patient_id < view.patients.at(b).patient_id;
    });
    const std::uint64_t inoc_seed = stage_seed(cfg.exp, "inoculate");
    std::vector<Example> inoc;
    for (std::uint32_t id : sorted_ids) {
      const PatientEHR& source = view.patients.at(id);
      const auto samples = sample_rewrites(result.policy, source, run.catalog, 1,
                                           derive_seed(inoc_seed, source.patient_id, 5));
      inoc.emplace_back(verbalize(rewrite_to_ehr(source, samples.front()), run.catalog).text,
                        view.labels.at(id));
    }
    TrainConfig inoc_cfg = cfg.exp.predictor_train;
    inoc_cfg.rng_seed = inoc_seed;
    const PredictorModel final_model =
        inoculate(predictor, inoc, inoc_cfg, cfg.exp.inoculate_lr_scale, cfg.exp.inoculate_max);

    const double alpha =
        cfg.exp.alpha ? *cfg.exp.alpha
                      : sweep_alpha_on_validation(final_model, result.policy, view, run.split.val,
                                                  run.catalog, cfg.exp.n_rewrites,
                                                  stage_seed(cfg.exp, "alpha_sweep"));
    reports.push_back(evaluate_with(cfg, run, final_model, result.policy, alpha));
    tasks.push_back(cfg.exp.task_id);
    modes.push_back(mode_name(cfg.mode));
    alphas.push_back(alpha);
    lambdas.push_back(lambda);
  }
  std::ofstream os(path_in(cfg, "sweep_lambda.csv"));
  os << metrics_csv(tasks, modes, alphas, lambdas, reports, cfg.exp.bucket_edges);
}

}  // namespace

std::string metrics_csv(const std::vector<std::string>& tasks,
                        const std::vector<std::string>& modes, const std::vector<double>& alphas,
                        const std::vector<double>& lambdas,
                        const std::vector<MetricReport>& reports,
                        const std::vector<std::size_t>& bucket_edges) {
  std::ostringstream os;
  os << "task,mode,alpha,lambda,auroc,auroc_std,auprc,auprc_std";
  const std::vector<std::string> buckets = stratum_labels(bucket_edges);
  for (const auto& b : buckets) os << ",auroc_" << b << ",auprc_" << b << ",n_" << b;
  os << "\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const MetricReport& r = reports[i];
    char ab[16], lb[16];
    std::snprintf(ab, sizeof(ab), "%.2f", alphas[i]);
    std::snprintf(lb, sizeof(lb), "%.2f", lambdas[i]);
    os << tasks[i] << "," << modes[i] << "," << ab << "," << lb << "," << fmt(100.0 * r.auroc)
       << "," << fmt(100.0 * r.auroc_std) << "," << fmt(100.0 * r.auprc) << ","
       << fmt(100.0 * r.auprc_std);
    for (const auto& b : buckets) {
      auto it = r.strata.find(b);
      if (it == r.strata.end()) {
        os << ",,,0";
        continue;
      }
      os << "," << (it->second.auroc ? fmt(100.0 * *it->second.auroc) : "") << ","
         << (it->second.auprc ? fmt(100.0 * *it->second.auprc) : "") << "," << it->second.count;
    }
    os << "\n";
  }
  return os.str();
}

void run_stage(const std::string& stage, const RunConfig& config,
               const std::optional<std::string>& sweep) {
  if (std::find(kStageNames.begin(), kStageNames.end(), stage) == kStageNames.end()) {
    throw ConfigError("unknown stage: " + stage);
  }
  fs::create_directories(config.workdir);
  WorkdirLock lock(config.workdir);

  const std::string cohort = config.resolved_cohort_path();
  const std::string catalog = config.resolved_catalog_path();
  const std::string splits = path_in(config, "splits.json");
  const std::string target = config.exp.task_id;

  StageIo io{config, stage, {}, {}};
  std::vector<std::string> pseudo = config.exp.effective_pseudo_tasks();

  if (stage == "gen-data") {
    io.outputs = {cohort, catalog, path_in(config, "oracle.json")};
  } else if (stage == "build-rewrites") {
    io.inputs = {cohort, catalog};
    io.outputs = {splits};
    for (const auto& t : pseudo) {
      io.outputs.push_back(path_in(config, "rewrites_" + t + ".jsonl"));
      io.outputs.push_back(path_in(config, "score_tables_" + t + ".json"));
    }
  } else if (stage == "train-scorer") {
    io.inputs = {cohort, catalog, splits};
    for (const auto& t : pseudo) io.inputs.push_back(path_in(config, "rewrites_" + t + ".jsonl"));
    for (const auto& t : pseudo) io.outputs.push_back(path_in(config, "scorer_" + t + ".bin"));
  } else if (stage == "build-drw") {
    io.inputs = {cohort, catalog, splits};
    if (config.mode != AblationMode::NoDrw) {
      for (const auto& t : pseudo) {
        io.inputs.push_back(path_in(config, "rewrites_" + t + ".jsonl"));
        io.inputs.push_back(path_in(config, "scorer_" + t + ".bin"));
      }
    }
    io.outputs = {path_in(config, "drw.jsonl"), path_in(config, "drw_meta.json")};
  } else if (stage == "train-rewriter") {
    if (config.mode != AblationMode::NoRewriter) {
      io.inputs = {cohort, catalog, path_in(config, "drw.jsonl")};
    }
    io.outputs = {path_in(config, "rewriter_mle.json")};
  } else if (stage == "train-predictor") {
    io.inputs = {cohort, catalog, splits, path_in(config, "rewrites_" + target + ".jsonl"),
                 path_in(config, "rewriter_mle.json")};
    io.outputs = {path_in(config, "augmented.jsonl"), path_in(config, "predictor.bin")};
  } else if (stage == "kl-align") {
    io.inputs = {path_in(config, "rewriter_mle.json")};
    if (config.mode != AblationMode::NoKl) {
      io.inputs.push_back(cohort);
      io.inputs.push_back(catalog);
      io.inputs.push_back(splits);
      io.inputs.push_back(path_in(config, "predictor.bin"));
    }
    io.outputs = {path_in(config, "rewriter_aligned.json"),
                  path_in(config, "training_log.jsonl")};
  } else if (stage == "inoculate") {
    io.inputs = {cohort, catalog, splits, path_in(config, "predictor.bin"),
                 path_in(config, "rewriter_aligned.json")};
    io.outputs = {path_in(config, "inoculation.jsonl"), path_in(config, "predictor_final.bin")};
  } else if (stage == "evaluate") {
    io.inputs = {cohort, catalog, splits, path_in(config, "predictor_final.bin"),
                 path_in(config, "rewriter_aligned.json")};
    io.outputs = {path_in(config, "metrics.json"), path_in(config, "metrics.csv")};
  } else if (stage == "sweep") {
    const std::string variant = sweep.value_or("alpha");
    if (variant == "alpha") {
      io.inputs = {cohort, catalog, splits, path_in(config, "predictor_final.bin"),
                   path_in(config, "rewriter_aligned.json")};
      io.outputs = {path_in(config, "sweep_alpha.csv")};
    } else {
      io.inputs = {cohort, catalog, splits, path_in(config, "predictor.bin"),
                   path_in(config, "rewriter_mle.json")};
      io.outputs = {path_in(config, "sweep_lambda.csv")};
    }
  }

  io.check_inputs();
  if (io.up_to_date()) {
    std::cout << "[" << stage << "] up-to-date, skipping\n";
    return;
  }

  const auto t0 = std::chrono::steady_clock::now();
  if (stage == "gen-data") {
    stage_gen_data(config);
  } else if (stage == "build-rewrites") {
    stage_build_rewrites(config);
  } else if (stage == "train-scorer") {
    stage_train_scorer(config);
  } else if (stage == "build-drw") {
    stage_build_drw(config);
  } else if (stage == "train-rewriter") {
    stage_train_rewriter(config);
  } else if (stage == "train-predictor") {
    stage_train_predictor(config);
  } else if (stage == "kl-align") {
    stage_kl_align(config);
  } else if (stage == "inoculate") {
    stage_inoculate(config);
  } else if (stage == "evaluate") {
    stage_evaluate(config);
  } else if (stage == "sweep") {
    stage_sweep(config, sweep.value_or("alpha"));
  }
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  io.write_manifest(wall);
  std::cout << "[" << stage << "] done in " << fmt(wall) << "s\n";
}

void run_all_stages(const RunConfig& config) {
  for (const auto& stage : kStageNames) {
    if (stage == "sweep") continue;
    run_stage(stage, config);
  }
}

}  // namespace ehrw
