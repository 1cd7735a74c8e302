#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "ehrw/feature_select.hpp"
#include "ehrw/metrics.hpp"
#include "ehrw/predictor.hpp"
#include "ehrw/synth.hpp"

using namespace ehrw;

namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

double positive_rate(const std::vector<int>& labels) {
  double s = 0.0;
  for (int y : labels) s += y;
  return s / static_cast<double>(labels.size());
}

}  // namespace

TEST_CASE("generate_cohort hits the target positive rate") {
  CohortSpec spec;
  spec.n_patients = 2000;
  spec.n_features = 30;
  spec.n_relevant = 5;
  spec.positive_rate_target = 0.02;
  spec.seed = 9;

  SUBCASE("mor") {
    const GeneratedCohort gen = generate_cohort(spec, "mor");
    const double rate = positive_rate(gen.cohort.labels.at("mor"));
    CHECK(rate >= 0.016);
    CHECK(rate <= 0.024);
  }
  SUBCASE("ra and los calibrate their latent attributes") {
    spec.positive_rate_target = 0.3;
    const GeneratedCohort ra = generate_cohort(spec, "ra");
    CHECK(positive_rate(ra.cohort.labels.at("ra")) == doctest::Approx(0.3).epsilon(0.2));
    const GeneratedCohort los = generate_cohort(spec, "los");
    CHECK(positive_rate(los.cohort.labels.at("los")) == doctest::Approx(0.3).epsilon(0.2));
  }
  SUBCASE("infeasible targets are rejected") {
    spec.n_patients = 10;
    spec.positive_rate_target = 0.001;  // finer than 1/10 resolution
    CHECK_THROWS_AS(generate_cohort(spec, "mor"), InfeasibleSpecError);
  }
}

TEST_CASE("generated patients validate against the generated catalog") {
  CohortSpec spec;
  spec.n_patients = 100;
  spec.seed = 21;
  const GeneratedCohort gen = generate_cohort(spec, "mor");
  for (const auto& p : gen.cohort.patients) {
    CHECK(validate_ehr(p, gen.catalog).ok());
  }
  CHECK(gen.oracle.relevant_features.size() == 5);
  for (const auto& f : gen.oracle.relevant_features) CHECK(gen.catalog.contains(f));
}

TEST_CASE("no planted signal means chance-level prediction") {
  double sum_auroc = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    CohortSpec spec;
    spec.n_patients = 600;
    spec.n_features = 15;
    spec.n_relevant = 0;
    spec.positive_rate_target = 0.4;
    spec.seed = seed;
    const GeneratedCohort gen = generate_cohort(spec, "mor");

    std::vector<Example> train_set, test_set;
    for (std::size_t i = 0; i < gen.cohort.patients.size(); ++i) {
      auto& dst = (i % 4 == 0) ? test_set : train_set;
      dst.emplace_back(verbalize(gen.cohort.patients[i], gen.catalog).text,
                       gen.cohort.labels.at("mor")[i]);
    }
    TrainConfig cfg;
    cfg.learning_rate = 0.5;
    cfg.epochs = 5;
    cfg.patience = 5;
    const PredictorModel m = train(train_set, cfg, {}, 1u << 14, 0);
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& [t, y] : test_set) {
      scores.push_back(m.predict_proba(t));
      labels.push_back(y);
    }
    sum_auroc += auroc(scores, labels);
  }
  CHECK(sum_auroc / 5.0 == doctest::Approx(0.5).epsilon(0.1));
}

TEST_CASE("same seed gives a byte-identical cohort file") {
  CohortSpec spec;
  spec.n_patients = 150;
  spec.seed = 33;
  const auto dir = fs::temp_directory_path();
  const std::string path_a = (dir / "ehrw_cohort_a.jsonl").string();
  const std::string path_b = (dir / "ehrw_cohort_b.jsonl").string();
  save_cohort(path_a, generate_cohort(spec, "mor").cohort);
  save_cohort(path_b, generate_cohort(spec, "mor").cohort);
  CHECK(slurp(path_a) == slurp(path_b));
  CHECK(!slurp(path_a).empty());
  fs::remove(path_a);
  fs::remove(path_b);
}

TEST_CASE("label_task semantics") {
  PatientEHR p;
  p.patient_id = "p1";

  SUBCASE("ra: readmission within 15 days") {
    p.attrs["gap_days"] = 10.0;
    CHECK(label_task(p, "ra") == 1);
    p.attrs["gap_days"] = 20.0;
    CHECK(label_task(p, "ra") == 0);
    p.attrs["gap_days"] = 15.0;  // boundary: within
    CHECK(label_task(p, "ra") == 1);
  }
  SUBCASE("los: strictly longer than 7 days") {
    p.attrs["stay_days"] = 7.0;
    CHECK(label_task(p, "los") == 0);
    p.attrs["stay_days"] = 7.001;
    CHECK(label_task(p, "los") == 1);
  }
  SUBCASE("mor: planted logit with the stored uniform draw") {
    p.attrs["mor_logit"] = 4.0;  // sigmoid ~ 0.982
    p.attrs["mor_u"] = 0.5;
    CHECK(label_task(p, "mor") == 1);
    p.attrs["mor_u"] = 0.999;
    CHECK(label_task(p, "mor") == 0);
  }
  SUBCASE("missing attributes raise MissingAttributeError") {
    CHECK_THROWS_AS(label_task(p, "ra"), MissingAttributeError);
    CHECK_THROWS_AS(label_task(p, "unknown"), ConfigError);
  }
}

TEST_CASE("cohort persistence") {
  CohortSpec spec;
  spec.n_patients = 40;
  spec.seed = 55;
  const GeneratedCohort gen = generate_cohort(spec, "mor");
  const auto dir = fs::temp_directory_path();
  const std::string cohort_path = (dir / "ehrw_roundtrip.jsonl").string();
  const std::string catalog_path = (dir / "ehrw_catalog.json").string();

  SUBCASE("save then load reproduces the cohort exactly") {
    save_cohort(cohort_path, gen.cohort);
    const Cohort loaded = load_cohort(cohort_path, {"mor", "ra", "los"});
    REQUIRE(loaded.patients.size() == gen.cohort.patients.size());
    CHECK(loaded.patients == gen.cohort.patients);
    CHECK(loaded.labels == gen.cohort.labels);
    fs::remove(cohort_path);
  }

  SUBCASE("catalog round-trip preserves every entry") {
    save_catalog(catalog_path, gen.catalog);
    const FeatureCatalog loaded = load_catalog(catalog_path);
    REQUIRE(loaded.size() == gen.catalog.size());
    for (const auto& [id, entry] : gen.catalog.entries()) {
      const CatalogEntry& other = loaded.at(id);
      CHECK(other.display_name == entry.display_name);
      CHECK(other.modality == entry.modality);
      CHECK(other.value_kind == entry.value_kind);
      CHECK(other.reference_range == entry.reference_range);
    }
    fs::remove(catalog_path);
  }

  SUBCASE("a truncated line raises ParseError naming the line") {
    save_cohort(cohort_path, gen.cohort);
    std::string content = slurp(cohort_path);
    content += "{\"patient_id\": \"broken\"";  // no closing brace
    std::ofstream(cohort_path, std::ios::binary) << content;
    try {
      load_cohort(cohort_path);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line == gen.cohort.patients.size() + 1);
    }
    fs::remove(cohort_path);
  }

  SUBCASE("a missing task label raises SchemaError naming labels.<task>") {
    save_cohort(cohort_path, gen.cohort);
    try {
      load_cohort(cohort_path, {"malf"});
      FAIL("expected SchemaError");
    } catch (const SchemaError& e) {
      CHECK(e.field == "labels.malf");
    }
    fs::remove(cohort_path);
  }

  SUBCASE("missing file raises MissingArtifactError") {
    CHECK_THROWS_AS(load_cohort("/nonexistent/cohort.jsonl"), MissingArtifactError);
  }
}

TEST_CASE("planted features are recoverable by every ranker") {
  CohortSpec spec;
  spec.n_patients = 800;
  spec.n_features = 20;
  spec.n_relevant = 4;
  spec.positive_rate_target = 0.3;
  spec.noise_sigma = 0.5;
  spec.seed = 77;
  const GeneratedCohort gen = generate_cohort(spec, "mor");
  const std::vector<PatientEHR>& patients = gen.cohort.patients;
  const std::vector<int>& labels = gen.cohort.labels.at("mor");
  OperatorConfig config;

  auto rank_of = [](const std::vector<FeatureId>& ranking, const FeatureId& f) {
    return std::find(ranking.begin(), ranking.end(), f) - ranking.begin();
  };
  auto check_ranking = [&](const std::vector<FeatureId>& ranking) {
    std::vector<long> noise_ranks;
    for (std::size_t i = 0; i < ranking.size(); ++i) {
      if (!gen.oracle.relevant_features.count(ranking[i])) noise_ranks.push_back(i);
    }
    std::sort(noise_ranks.begin(), noise_ranks.end());
    const long median_noise = noise_ranks[noise_ranks.size() / 2];
    for (const auto& f : gen.oracle.relevant_features) {
      CHECK(rank_of(ranking, f) < median_noise);
    }
  };

  const FeatureScoreTable mi = mutual_information_scores(patients, labels, gen.catalog, config);
  std::vector<std::pair<double, FeatureId>> by_score;
  for (const auto& [f, s] : mi.scores) by_score.emplace_back(s, f);
  std::sort(by_score.begin(), by_score.end(), std::greater<>());
  std::vector<FeatureId> mi_ranking;
  for (const auto& [_, f] : by_score) mi_ranking.push_back(f);
  check_ranking(mi_ranking);
  check_ranking(mrmr_rank(patients, labels, gen.catalog, config));
  check_ranking(rfe_rank(patients, labels, gen.catalog, config));
}

TEST_CASE("oracle recoverability: planted features land in the MI top 10") {
  int successes = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    CohortSpec spec;
    spec.n_patients = 2000;
    spec.n_features = 50;
    spec.n_relevant = 5;
    spec.positive_rate_target = 0.3;
    spec.noise_sigma = 0.5;
    spec.seed = seed;
    const GeneratedCohort gen = generate_cohort(spec, "mor");
    const FeatureScoreTable mi = mutual_information_scores(
        gen.cohort.patients, gen.cohort.labels.at("mor"), gen.catalog, OperatorConfig{});
    std::vector<std::pair<double, FeatureId>> by_score;
    for (const auto& [f, s] : mi.scores) by_score.emplace_back(s, f);
    std::sort(by_score.begin(), by_score.end(), std::greater<>());
    std::size_t found = 0;
    for (std::size_t i = 0; i < 10 && i < by_score.size(); ++i) {
      found += gen.oracle.relevant_features.count(by_score[i].second);
    }
    if (found == gen.oracle.relevant_features.size()) ++successes;
  }
  CHECK(successes >= 4);
}
