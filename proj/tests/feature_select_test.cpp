#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "ehrw/feature_select.hpp"
#include "test_util.hpp"

using namespace ehrw;

namespace {

// Independent plug-in MI oracle via H(X) + H(Y) - H(X,Y).
double mi_entropy_oracle(const std::vector<int>& x, const std::vector<int>& y) {
  auto entropy = [](const std::vector<long long>& keys) {
    std::map<long long, std::size_t> counts;
    for (long long k : keys) counts[k] += 1;
    const double n = static_cast<double>(keys.size());
    double h = 0.0;
    for (const auto& [_, c] : counts) h -= (c / n) * std::log(c / n);
    return h;
  };
  std::vector<long long> xs, ys, xys;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xs.push_back(x[i]);
    ys.push_back(y[i]);
    xys.push_back(static_cast<long long>(x[i]) * 1000003LL + y[i]);
  }
  return entropy(xs) + entropy(ys) - entropy(xys);
}

// One-tuple-per-feature dataset from 0/1 columns; feature ids are the map keys.
std::vector<PatientEHR> dataset_from_columns(const std::map<FeatureId, std::vector<double>>& cols,
                                             std::size_t n_rows) {
  std::vector<PatientEHR> patients;
  for (std::size_t i = 0; i < n_rows; ++i) {
    PatientEHR p;
    p.patient_id = "p" + std::to_string(i);
    Visit visit;
    std::int64_t t = 1;
    for (const auto& [f, values] : cols) visit.push_back({f, values.at(i), t++});
    p.visits.push_back(std::move(visit));
    patients.push_back(std::move(p));
  }
  return patients;
}

FeatureCatalog catalog_for_columns(const std::map<FeatureId, std::vector<double>>& cols) {
  FeatureCatalog catalog;
  for (const auto& [f, _] : cols) {
    catalog.add(f, {f, Modality::Lab, std::nullopt, ValueKind::Numeric});
  }
  return catalog;
}

}  // namespace

TEST_CASE("mutual_information_scores on constructed columns") {
  OperatorConfig config;

  SUBCASE("a feature equal to a balanced label scores ln 2") {
    const std::map<FeatureId, std::vector<double>> cols = {{"f", {0, 0, 1, 1}}};
    const auto patients = dataset_from_columns(cols, 4);
    const auto table = mutual_information_scores(patients, {0, 0, 1, 1},
                                                 catalog_for_columns(cols), config);
    CHECK(table.scores.at("f") == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("an independent feature scores 0") {
    const std::map<FeatureId, std::vector<double>> cols = {{"f", {0, 1, 0, 1}}};
    const auto patients = dataset_from_columns(cols, 4);
    const auto table = mutual_information_scores(patients, {0, 0, 1, 1},
                                                 catalog_for_columns(cols), config);
    CHECK(table.scores.at("f") == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("a constant feature scores 0") {
    const std::map<FeatureId, std::vector<double>> cols = {{"f", {2, 2, 2, 2}}};
    const auto patients = dataset_from_columns(cols, 4);
    const auto table = mutual_information_scores(patients, {0, 0, 1, 1},
                                                 catalog_for_columns(cols), config);
    CHECK(table.scores.at("f") == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("degenerate labels are rejected") {
    const std::map<FeatureId, std::vector<double>> cols = {{"f", {0, 1, 0, 1}}};
    const auto patients = dataset_from_columns(cols, 4);
    CHECK_THROWS_AS(
        mutual_information_scores(patients, {1, 1, 1, 1}, catalog_for_columns(cols), config),
        DegenerateLabelsError);
  }
}

TEST_CASE("plugin_mi properties: symmetry, self-information, oracle match") {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> cat(0, 4);
  for (int it = 0; it < 100; ++it) {
    std::vector<int> x(50), y(50);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = cat(rng);
      y[i] = cat(rng);
    }
    CHECK(plugin_mi(x, y) == doctest::Approx(plugin_mi(y, x)).epsilon(1e-12));
    CHECK(plugin_mi(x, x) == doctest::Approx(plugin_entropy(x)).epsilon(1e-12));
    CHECK(plugin_mi(x, y) == doctest::Approx(mi_entropy_oracle(x, y)).epsilon(1e-9));
    CHECK(plugin_mi(x, y) >= 0.0);
  }
}

TEST_CASE("mrmr_rank") {
  OperatorConfig config;

  SUBCASE("first pick is the MI argmax") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int it = 0; it < 20; ++it) {
      std::map<FeatureId, std::vector<double>> cols;
      std::vector<int> labels(30);
      for (auto& y : labels) y = unit(rng) < 0.5 ? 1 : 0;
      for (int f = 0; f < 5; ++f) {
        std::vector<double> col(30);
        for (std::size_t i = 0; i < col.size(); ++i) {
          col[i] = unit(rng) < 0.3 ? labels[i] : (unit(rng) < 0.5 ? 0.0 : 1.0);
        }
        cols["f" + std::to_string(f)] = col;
      }
      const auto patients = dataset_from_columns(cols, 30);
      const auto catalog = catalog_for_columns(cols);
      const auto table = mutual_information_scores(patients, labels, catalog, config);
      const auto ranking = mrmr_rank(patients, labels, catalog, config);
      FeatureId best;
      double best_score = -1.0;
      for (const auto& [f, s] : table.scores) {
        if (s > best_score) {
          best_score = s;
          best = f;
        }
      }
      CHECK(ranking.front() == best);
    }
  }

  SUBCASE("a duplicated top feature is demoted below an independent one") {
    // y = [0 x4, 1 x4]; a1 == a2 strong but imperfect; b carries its own
    // signal and is nearly independent of a1.
    const std::vector<double> a = {0, 0, 0, 1, 1, 1, 1, 1};
    const std::vector<double> b = {0, 0, 1, 0, 1, 1, 0, 1};
    const std::vector<int> y = {0, 0, 0, 0, 1, 1, 1, 1};
    const std::map<FeatureId, std::vector<double>> cols = {{"a1", a}, {"a2", a}, {"b", b}};
    const auto patients = dataset_from_columns(cols, 8);
    const auto catalog = catalog_for_columns(cols);

    // Hand-evaluate the MID criterion with the oracle MI.
    auto codes = [](const std::vector<double>& v) {
      std::vector<int> out(v.size());
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<int>(v[i]);
      return out;
    };
    const double rel_a = mi_entropy_oracle(codes(a), y);
    const double rel_b = mi_entropy_oracle(codes(b), y);
    const double red_a2 = mi_entropy_oracle(codes(a), codes(a));  // = H(a)
    const double red_b = mi_entropy_oracle(codes(b), codes(a));
    REQUIRE(rel_a > rel_b);                       // a1 wins round one
    REQUIRE(rel_b - red_b > rel_a - red_a2);      // b wins round two

    const auto ranking = mrmr_rank(patients, y, catalog, config);
    CHECK(ranking[0] == "a1");
    CHECK(ranking[1] == "b");
    CHECK(ranking[2] == "a2");
  }

  SUBCASE("fewer than two candidates is an error") {
    const std::map<FeatureId, std::vector<double>> cols = {{"f", {0, 1, 0, 1}}};
    const auto patients = dataset_from_columns(cols, 4);
    CHECK_THROWS_AS(mrmr_rank(patients, {0, 0, 1, 1}, catalog_for_columns(cols), config),
                    PreconditionError);
  }
}

TEST_CASE("rfe_rank") {
  OperatorConfig config;

  SUBCASE("a feature equal to the label is ranked first") {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t n = 80;
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = i % 2;
    std::map<FeatureId, std::vector<double>> cols;
    std::vector<double> planted(n);
    for (std::size_t i = 0; i < n; ++i) planted[i] = labels[i];
    cols["planted"] = planted;
    for (int f = 0; f < 6; ++f) {
      std::vector<double> col(n);
      for (auto& v : col) v = gauss(rng);
      cols["noise" + std::to_string(f)] = col;
    }
    const auto patients = dataset_from_columns(cols, n);
    const auto catalog = catalog_for_columns(cols);

    // Exhaustive single-feature threshold-classifier oracle: the planted
    // column must be the strongest single feature before trusting RFE.
    auto single_feature_accuracy = [&](const std::vector<double>& col) {
      double best = 0.0;
      for (double th : col) {
        std::size_t correct = 0, correct_flip = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const int pred = col[i] >= th ? 1 : 0;
          correct += (pred == labels[i]);
          correct_flip += ((1 - pred) == labels[i]);
        }
        best = std::max({best, correct / double(n), correct_flip / double(n)});
      }
      return best;
    };
    double planted_acc = single_feature_accuracy(planted);
    for (const auto& [f, col] : cols) {
      if (f != "planted") REQUIRE(planted_acc > single_feature_accuracy(col));
    }

    const auto ranking = rfe_rank(patients, labels, catalog, config);
    CHECK(ranking.front() == "planted");
  }

  SUBCASE("two features rank by coefficient magnitude") {
    const std::vector<int> labels = {0, 0, 0, 0, 1, 1, 1, 1};
    std::map<FeatureId, std::vector<double>> cols;
    cols["strong"] = {0, 0, 0, 0, 1, 1, 1, 1};
    cols["weak"] = {0, 1, 0, 1, 0, 1, 0, 1};
    const auto patients = dataset_from_columns(cols, 8);
    const auto ranking = rfe_rank(patients, labels, catalog_for_columns(cols), config);
    CHECK(ranking == std::vector<FeatureId>{"strong", "weak"});
  }

  SUBCASE("all-constant features fall back to a lexical ranking") {
    std::map<FeatureId, std::vector<double>> cols;
    cols["zb"] = {1, 1, 1, 1};
    cols["aa"] = {2, 2, 2, 2};
    const auto patients = dataset_from_columns(cols, 4);
    const auto ranking = rfe_rank(patients, {0, 1, 0, 1}, catalog_for_columns(cols), config);
    CHECK(ranking == std::vector<FeatureId>{"aa", "zb"});
  }
}

TEST_CASE("top_percent_select") {
  OperatorConfig config;
  FeatureScoreTable table;
  table.method = OperatorId::Mi;
  for (int i = 1; i <= 8; ++i) table.scores["f" + std::to_string(i)] = i;

  SUBCASE("x = 0.25 keeps the top quarter; top_fill pads the rest") {
    config.x_percent = 0.25;
    config.top_fill = 0;
    auto selected = top_percent_select(table, config);
    CHECK(selected == std::set<FeatureId>{"f7", "f8"});

    config.top_fill = 10;  // all 8 features are within the global top 10
    selected = top_percent_select(table, config);
    CHECK(selected.size() == 8);
  }
  SUBCASE("x = 1.0 keeps everything") {
    config.x_percent = 1.0;
    config.top_fill = 0;
    CHECK(top_percent_select(table, config).size() == 8);
  }
  SUBCASE("a tie at the threshold includes all tied features") {
    FeatureScoreTable flat;
    flat.method = OperatorId::Mi;
    for (int i = 1; i <= 8; ++i) flat.scores["f" + std::to_string(i)] = 1.0;
    config.x_percent = 0.25;
    config.top_fill = 0;
    CHECK(top_percent_select(flat, config).size() == 8);
  }
}

TEST_CASE("apply_operator") {
  const FeatureCatalog catalog = testutil::lab_catalog();
  OperatorContext ctx;
  ctx.catalog = &catalog;
  ctx.config.x_percent = 0.3;
  ctx.config.rng_seed = 11;
  ctx.task_id = "mor";

  SUBCASE("temporal keeps the most recent fraction, boundary inclusive") {
    Visit visit;
    for (int t = 1; t <= 10; ++t) visit.push_back({"glucose", 1.0 * t, t});
    PatientEHR p;
    p.patient_id = "p1";
    p.visits.push_back(visit);
    const Rewrite rw = apply_operator(p, OperatorId::Temporal, ctx);
    // cutoff = ceil(0.7 * 10) = 7
    CHECK(rw.kept.size() == 4);
    for (std::uint32_t idx : rw.kept) CHECK(visit[idx].timestamp >= 7);
  }

  SUBCASE("abnormal keeps out-of-range numerics only") {
    const PatientEHR p = testutil::single_visit_patient(
        "p1", {{"potassium", 6.1, 1},          // above [3.5, 5.0] -> kept
               {"potassium", 4.0, 2},          // inside -> dropped
               {"glucose", 99.0, 3},           // no range -> dropped
               {"sodium", Value{}, 4},         // missing value -> dropped
               {"sodium", 120.0, 5}});         // below [135, 145] -> kept
    const Rewrite rw = apply_operator(p, OperatorId::Abnormal, ctx);
    CHECK(rw.kept == std::vector<std::uint32_t>{0, 4});
  }

  SUBCASE("identity keeps the full tuple multiset and is a verbalize fixed point") {
    std::mt19937_64 rng(2);
    const PatientEHR p = testutil::random_patient(rng, "p1", 9);
    const Rewrite rw = apply_operator(p, OperatorId::Identity, ctx);
    CHECK(rw.kept.size() == tuple_count(p));
    CHECK(verbalize(rewrite_to_ehr(p, rw), catalog).text == verbalize(p, catalog).text);
  }

  SUBCASE("data-driven operators require their score table") {
    std::mt19937_64 rng(2);
    const PatientEHR p = testutil::random_patient(rng, "p1", 5);
    CHECK_THROWS_AS(apply_operator(p, OperatorId::Mi, ctx), MissingScoreTableError);
  }

  SUBCASE("data-driven operators keep exactly the selected features") {
    std::map<OperatorId, FeatureScoreTable> tables;
    FeatureScoreTable t;
    t.method = OperatorId::Mi;
    t.scores = {{"potassium", 3.0}, {"sodium", 2.0}, {"glucose", 1.0}};
    tables[OperatorId::Mi] = t;
    ctx.score_tables = &tables;
    ctx.config.top_fill = 0;
    ctx.config.x_percent = 0.3;  // ceil(0.3 * 3) = top 1 of 3
    const PatientEHR p = testutil::single_visit_patient(
        "p1", {{"potassium", 4.1, 1}, {"sodium", 140.0, 2}, {"glucose", 5.0, 3}});
    const Rewrite rw = apply_operator(p, OperatorId::Mi, ctx);
    CHECK(rw.kept == std::vector<std::uint32_t>{0});
  }

  SUBCASE("seeded random operators are deterministic and sized by ceil") {
    std::mt19937_64 rng(4);
    const PatientEHR p = testutil::random_patient(rng, "p1", 10);
    const Rewrite a = apply_operator(p, OperatorId::RandTuple, ctx);
    const Rewrite b = apply_operator(p, OperatorId::RandTuple, ctx);
    CHECK(a.kept == b.kept);
    CHECK(a.kept.size() ==
          static_cast<std::size_t>(std::ceil(0.3 * static_cast<double>(tuple_count(p)))));

    OperatorContext other = ctx;
    other.config.rng_seed = 12;
    const Rewrite c = apply_operator(p, OperatorId::RandTuple, other);
    CHECK(a.kept != c.kept);

    const Rewrite rf = apply_operator(p, OperatorId::RandFeature, ctx);
    CHECK(rf.kept == apply_operator(p, OperatorId::RandFeature, ctx).kept);
  }

  SUBCASE("every operator emits a tuple subset on random records") {
    std::map<OperatorId, FeatureScoreTable> tables;
    FeatureScoreTable t;
    t.method = OperatorId::Mi;
    t.scores = {{"potassium", 3.0}, {"sodium", 2.0}, {"glucose", 1.0},
                {"dx_code", 0.5},   {"aspirin", 0.2}, {"age", 0.1}};
    tables[OperatorId::Mi] = t;
    tables[OperatorId::Mrmr] = t;
    tables[OperatorId::Rfe] = t;
    ctx.score_tables = &tables;
    std::mt19937_64 rng(6);
    for (int it = 0; it < 30; ++it) {
      const PatientEHR p = testutil::random_patient(rng, "p" + std::to_string(it), 1 + it % 12);
      for (int op = 0; op < kNumOperators; ++op) {
        const Rewrite rw = apply_operator(p, static_cast<OperatorId>(op), ctx);
        CHECK(subset_violations(p, rw) == 0);
      }
    }
  }

  SUBCASE("a single-tuple record never crashes any operator") {
    std::map<OperatorId, FeatureScoreTable> tables;
    FeatureScoreTable t;
    t.method = OperatorId::Mi;
    t.scores = {{"potassium", 1.0}};
    tables[OperatorId::Mi] = t;
    tables[OperatorId::Mrmr] = t;
    tables[OperatorId::Rfe] = t;
    ctx.score_tables = &tables;
    const PatientEHR p = testutil::single_visit_patient("p1", {{"potassium", 9.0, 3}});
    for (int op = 0; op < kNumOperators; ++op) {
      const Rewrite rw = apply_operator(p, static_cast<OperatorId>(op), ctx);
      CHECK(rw.kept.size() <= 1);
    }
  }
}
