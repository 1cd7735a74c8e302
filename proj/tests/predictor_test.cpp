#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "ehrw/metrics.hpp"
#include "ehrw/predictor.hpp"
#include "ehrw/rng.hpp"
#include "ehrw/synth.hpp"

using namespace ehrw;

namespace {

std::vector<std::string> ngrams_of(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) tokens.push_back(cur), cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) tokens.push_back(cur);
  std::vector<std::string> grams = tokens;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    grams.push_back(tokens[i] + '\x1e' + tokens[i + 1]);
  }
  return grams;
}

// Multiset difference a \ b.
std::vector<std::string> multiset_minus(std::vector<std::string> a, std::vector<std::string> b) {
  std::multiset<std::string> bs(b.begin(), b.end());
  std::vector<std::string> out;
  for (auto& g : a) {
    auto it = bs.find(g);
    if (it != bs.end()) {
      bs.erase(it);
    } else {
      out.push_back(g);
    }
  }
  return out;
}

double vector_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    scale += a[i] * a[i] + b[i] * b[i];
  }
  return std::sqrt(diff) / std::max(1e-12, std::sqrt(scale));
}

std::vector<double> finite_diff_grad(PredictorModel model,
                                     const std::vector<EncodedExample>& batch, double h) {
  std::vector<double> params = model.flat_params();
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    model.set_flat_params(params);
    const double up = model.bce_loss(batch, nullptr);
    params[i] = saved - h;
    model.set_flat_params(params);
    const double down = model.bce_loss(batch, nullptr);
    params[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  model.set_flat_params(params);
  return grad;
}

std::vector<EncodedExample> random_encoded_batch(std::mt19937_64& rng, std::uint32_t hash_dim,
                                                 std::size_t n) {
  const char* words[] = {"fever", "cough", "nausea", "sepsis", "stable", "acute", "chronic",
                         "elevated", "low", "normal"};
  std::uniform_int_distribution<int> word(0, 9);
  std::uniform_int_distribution<int> len(1, 12);
  std::uniform_int_distribution<int> label(0, 1);
  std::vector<EncodedExample> batch;
  for (std::size_t i = 0; i < n; ++i) {
    std::string text;
    const int m = len(rng);
    for (int k = 0; k < m; ++k) {
      if (k) text += ' ';
      text += words[word(rng)];
    }
    batch.emplace_back(encode(text, hash_dim), label(rng));
  }
  return batch;
}

}  // namespace

TEST_CASE("encode") {
  SUBCASE("empty text encodes to the zero vector") {
    CHECK(encode("", 1u << 10).items.empty());
    CHECK(encode("   \n\t ", 1u << 10).items.empty());
  }
  SUBCASE("deterministic across calls") {
    const SparseVec a = encode("Fever and chills", 1u << 12);
    const SparseVec b = encode("Fever and chills", 1u << 12);
    CHECK(a.items == b.items);
  }
  SUBCASE("L2 norm is 1 for non-empty text") {
    const SparseVec v = encode("- potassium: 4.1", 1u << 12);
    double norm2 = 0.0;
    for (const auto& [_, x] : v.items) norm2 += x * x;
    CHECK(norm2 == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("one substituted token changes at most 3 n-grams per side") {
    const std::string t1 = "low sodium with elevated lactate today";
    const std::string t2 = "low sodium with normal lactate today";
    const auto only1 = multiset_minus(ngrams_of(t1), ngrams_of(t2));
    const auto only2 = multiset_minus(ngrams_of(t2), ngrams_of(t1));
    CHECK(only1.size() <= 3);  // 1 unigram + 2 bigrams
    CHECK(only2.size() <= 3);

    // Bucket-level: the raw count vectors differ in at most 3 buckets per side.
    const std::uint32_t dim = 1u << 16;
    std::map<std::uint32_t, double> c1, c2;
    for (const auto& [i, v] : encode_counts(t1, dim).items) c1[i] = v;
    for (const auto& [i, v] : encode_counts(t2, dim).items) c2[i] = v;
    std::size_t changed = 0;
    std::set<std::uint32_t> buckets;
    for (const auto& [i, _] : c1) buckets.insert(i);
    for (const auto& [i, _] : c2) buckets.insert(i);
    for (std::uint32_t i : buckets) {
      if (c1[i] != c2[i]) ++changed;
    }
    CHECK(changed <= 6);
  }
  SUBCASE("hash_dim must be a power of two") {
    CHECK_THROWS_AS(encode("x", 1000), ConfigError);
  }
}

TEST_CASE("predict_proba") {
  SUBCASE("zero model outputs exactly 0.5") {
    const PredictorModel m = PredictorModel::zeros(1u << 10, 0);
    CHECK(m.predict_proba("anything at all") == 0.5);
    const PredictorModel mlp = PredictorModel::zeros(1u << 10, 8);
    CHECK(mlp.predict_proba("anything at all") == 0.5);
  }
  SUBCASE("outputs live strictly inside (0,1)") {
    std::mt19937_64 rng(3);
    const PredictorModel m = PredictorModel::random_init(1u << 10, 4, 9);
    for (const auto& [x, _] : random_encoded_batch(rng, 1u << 10, 50)) {
      const double p = m.predict_proba_encoded(x);
      CHECK(p > 0.0);
      CHECK(p < 1.0);
    }
  }
}

TEST_CASE("train") {
  SUBCASE("memorizes a single positive example") {
    TrainConfig cfg;
    cfg.learning_rate = 1.0;
    cfg.epochs = 300;
    cfg.patience = 300;
    // one positive plus a throwaway negative to satisfy the two-class precondition
    const std::vector<Example> examples = {{"severe sepsis with shock", 1},
                                           {"routine checkup", 0}};
    const PredictorModel m = train(examples, cfg, {}, 1u << 12, 0);
    CHECK(m.predict_proba("severe sepsis with shock") >= 0.95);
    CHECK(m.predict_proba("routine checkup") <= 0.05);
  }

  SUBCASE("full-batch descent on the convex logistic objective is monotone") {
    std::mt19937_64 rng(5);
    const auto batch = random_encoded_batch(rng, 1u << 10, 24);
    PredictorModel m = PredictorModel::zeros(1u << 10, 0);
    double prev = m.bce_loss(batch, nullptr);
    std::vector<double> grad;
    for (int it = 0; it < 50; ++it) {
      m.bce_loss(batch, &grad);
      m.apply_update(grad, 0.05);
      const double loss = m.bce_loss(batch, nullptr);
      CHECK(loss <= prev + 1e-6);
      prev = loss;
    }
  }

  SUBCASE("label flip negates the logistic model") {
    std::mt19937_64 rng(6);
    std::vector<Example> examples;
    const char* texts[] = {"fever cough", "stable vitals", "acute sepsis", "normal labs",
                           "elevated lactate", "chronic pain", "low sodium", "nausea"};
    for (int i = 0; i < 8; ++i) examples.emplace_back(texts[i], i % 2);
    std::vector<Example> flipped = examples;
    for (auto& [_, y] : flipped) y = 1 - y;

    TrainConfig cfg;
    cfg.learning_rate = 0.5;
    cfg.epochs = 20;
    cfg.patience = 20;
    const PredictorModel m = train(examples, cfg, {}, 1u << 12, 0);
    const PredictorModel mf = train(flipped, cfg, {}, 1u << 12, 0);
    for (const auto& [text, _] : examples) {
      CHECK(mf.predict_proba(text) == doctest::Approx(1.0 - m.predict_proba(text)).epsilon(1e-6));
    }
  }

  SUBCASE("degenerate labels are rejected") {
    TrainConfig cfg;
    CHECK_THROWS_AS(train({{"a", 1}, {"b", 1}}, cfg), DegenerateLabelsError);
    CHECK_THROWS_AS(train({}, cfg), DegenerateLabelsError);
  }

  SUBCASE("early stopping returns the best-validation checkpoint") {
    std::mt19937_64 rng(7);
    std::vector<Example> examples, val;
    const char* words[] = {"alpha", "beta", "gamma", "delta"};
    std::uniform_int_distribution<int> w(0, 3);
    for (int i = 0; i < 40; ++i) {
      std::string t = std::string(words[w(rng)]) + " " + words[w(rng)];
      (i % 4 ? examples : val).emplace_back(t, i % 2);
    }
    TrainConfig cfg;
    cfg.learning_rate = 2.0;  // aggressive on purpose
    cfg.epochs = 30;
    cfg.patience = 3;
    const PredictorModel m = train(examples, cfg, val, 1u << 10, 0);
    CHECK(m.meta().epochs_run <= 30);
    CHECK(std::isfinite(m.meta().best_val_loss));
  }
}

TEST_CASE("bce gradient matches central finite differences") {
  std::mt19937_64 rng(11);
  for (int it = 0; it < 20; ++it) {
    const std::uint32_t dim = 1u << 6;
    const int hidden = it % 2 ? 3 : 0;
    PredictorModel m = PredictorModel::random_init(dim, hidden, 100 + it);
    const auto batch = random_encoded_batch(rng, dim, 6);
    std::vector<double> analytic;
    m.bce_loss(batch, &analytic);
    const std::vector<double> numeric = finite_diff_grad(m, batch, 1e-5);
    CHECK(vector_rel_err(analytic, numeric) <= 1e-4);
  }
}

TEST_CASE("inoculate") {
  std::mt19937_64 rng(13);
  std::vector<Example> examples;
  const char* texts[] = {"fever cough acute", "stable vitals normal", "sepsis shock lactate",
                         "routine visit checkup"};
  for (int i = 0; i < 24; ++i) examples.emplace_back(texts[i % 4], (i % 4) % 2);
  TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.epochs = 15;
  cfg.patience = 15;
  const PredictorModel base = train(examples, cfg, {}, 1u << 12, 0);

  SUBCASE("empty rewrite set is a no-op") {
    const PredictorModel same = inoculate(base, {}, cfg);
    CHECK(same.flat_params() == base.flat_params());
  }
  SUBCASE("inoculating on already-correct examples barely moves validation loss") {
    std::vector<EncodedExample> val;
    for (const auto& [t, y] : examples) val.emplace_back(encode(t, base.hash_dim()), y);
    const double before = base.bce_loss(val, nullptr);
    const PredictorModel after = inoculate(base, examples, cfg);
    const double after_loss = after.bce_loss(val, nullptr);
    CHECK(std::abs(after_loss - before) <= 0.10 * before);
    CHECK(after.params_finite());
  }
  SUBCASE("bounded sample size") {
    std::vector<Example> many;
    for (int i = 0; i < 2000; ++i) many.emplace_back(texts[i % 4], (i % 4) % 2);
    const PredictorModel after = inoculate(base, many, cfg, 0.1, 64);
    CHECK(after.params_finite());
  }
}

TEST_CASE("batch kernels match their serial references") {
  std::mt19937_64 rng(17);
  std::vector<std::string> texts;
  const char* words[] = {"fever", "cough", "nausea", "sepsis", "stable"};
  std::uniform_int_distribution<int> w(0, 4);
  for (int i = 0; i < 200; ++i) {
    std::string t;
    for (int k = 0; k < 6; ++k) t += std::string(k ? " " : "") + words[w(rng)];
    texts.push_back(t);
  }
  const PredictorModel m = PredictorModel::random_init(1u << 12, 4, 23);
  CHECK(batch_predict_proba(m, texts) == batch_predict_proba_serial(m, texts));

  const auto par = batch_encode(texts, 1u << 12);
  const auto ser = batch_encode_serial(texts, 1u << 12);
  REQUIRE(par.size() == ser.size());
  for (std::size_t i = 0; i < par.size(); ++i) CHECK(par[i].items == ser[i].items);
}

TEST_CASE("checkpoint round-trip is exact") {
  PredictorModel m = PredictorModel::random_init(1u << 8, 5, 31);
  m.meta().epochs_run = 7;
  m.meta().best_val_loss = 0.1234;
  const std::string path = std::filesystem::temp_directory_path() / "ehrw_model_test.bin";
  m.save(path);
  const PredictorModel loaded = PredictorModel::load(path);
  CHECK(loaded.flat_params() == m.flat_params());
  CHECK(loaded.hash_dim() == m.hash_dim());
  CHECK(loaded.hidden_units() == m.hidden_units());
  CHECK(loaded.meta().epochs_run == 7);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(PredictorModel::load("/nonexistent/model.bin"), MissingArtifactError);
}

TEST_CASE("trained predictor beats chance on a planted cohort") {
  CohortSpec spec;
  spec.n_patients = 400;
  spec.n_features = 15;
  spec.n_relevant = 5;
  spec.positive_rate_target = 0.3;
  spec.seed = 71;
  const GeneratedCohort gen = generate_cohort(spec, "mor");

  std::vector<Example> train_examples, test_examples;
  for (std::size_t i = 0; i < gen.cohort.patients.size(); ++i) {
    const std::string text = verbalize(gen.cohort.patients[i], gen.catalog).text;
    auto& dst = (i % 5 == 0) ? test_examples : train_examples;
    dst.emplace_back(text, gen.cohort.labels.at("mor")[i]);
  }
  TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.epochs = 10;
  cfg.patience = 3;
  cfg.rng_seed = 5;
  const PredictorModel m = train(train_examples, cfg, {}, 1u << 16, 16);

  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& [t, y] : test_examples) {
    scores.push_back(m.predict_proba(t));
    labels.push_back(y);
  }
  CHECK(auroc(scores, labels) > 0.5);
}
