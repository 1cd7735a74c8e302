#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>
#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "ehrw/rewriter.hpp"
#include "ehrw/rng.hpp"
#include "test_util.hpp"

using namespace ehrw;

namespace {

RewriterPolicy materialized_policy(const PatientEHR& ehr) {
  RewriterPolicy policy;
  for (const auto& fv : flatten_tuples(ehr)) policy.feature_logits.emplace(fv.feature, 0.0);
  return policy;
}

double nll_of(const RewriterPolicy& policy, const std::vector<RewritePair>& pairs,
              const FeatureCatalog& catalog) {
  return mask_nll(policy, pairs, catalog);
}

std::vector<double> finite_diff_policy_grad(RewriterPolicy policy,
                                            const std::vector<RewritePair>& pairs,
                                            const FeatureCatalog& catalog, double h) {
  std::vector<double> params = policy.flat_params();
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    policy.set_flat_params(params);
    const double up = nll_of(policy, pairs, catalog);
    params[i] = saved - h;
    policy.set_flat_params(params);
    const double down = nll_of(policy, pairs, catalog);
    params[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double vector_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    scale += a[i] * a[i] + b[i] * b[i];
  }
  return std::sqrt(diff) / std::max(1e-12, std::sqrt(scale));
}

}  // namespace

TEST_CASE("tuple_logit and tuple_q") {
  const FeatureCatalog catalog = testutil::lab_catalog();
  const PatientEHR p = testutil::single_visit_patient(
      "p1", {{"potassium", 6.1, 2}, {"glucose", 4.0, 4}});

  SUBCASE("zero policy gives q = 0.5 everywhere") {
    const RewriterPolicy policy;
    for (std::size_t j = 0; j < tuple_count(p); ++j) {
      CHECK(tuple_logit(policy, p, j, catalog) == 0.0);
      CHECK(tuple_q(policy, p, j, catalog) == 0.5);
    }
  }
  SUBCASE("raising a feature logit raises q for its tuples") {
    RewriterPolicy policy;
    policy.feature_logits["potassium"] = 0.0;
    const double before = tuple_q(policy, p, 0, catalog);
    policy.feature_logits["potassium"] = 1.5;
    CHECK(tuple_q(policy, p, 0, catalog) > before);
    CHECK(tuple_q(policy, p, 1, catalog) == 0.5);  // other feature untouched
  }
  SUBCASE("context features feed the logit") {
    RewriterPolicy policy;
    policy.w_abnormal = 2.0;
    // potassium 6.1 is outside [3.5, 5.0]; glucose has no range
    CHECK(tuple_logit(policy, p, 0, catalog) == 2.0);
    CHECK(tuple_logit(policy, p, 1, catalog) == 0.0);

    RewriterPolicy recency;
    recency.w_recency = 1.0;
    CHECK(tuple_logit(recency, p, 1, catalog) == 1.0);        // t = T_max
    CHECK(tuple_logit(recency, p, 0, catalog) == doctest::Approx(0.5));  // t/T_max = 2/4
  }
  SUBCASE("serialized policy reproduces logits bit for bit") {
    RewriterPolicy policy;
    policy.feature_logits["potassium"] = 0.12345678901234567;
    policy.w_recency = -0.987654321;
    policy.w_modality[2] = 3.14159e-7;
    const std::string path = std::filesystem::temp_directory_path() / "ehrw_policy_test.json";
    policy.save(path);
    const RewriterPolicy loaded = RewriterPolicy::load(path);
    std::filesystem::remove(path);
    for (std::size_t j = 0; j < tuple_count(p); ++j) {
      CHECK(tuple_logit(loaded, p, j, catalog) == tuple_logit(policy, p, j, catalog));
    }
  }
}

TEST_CASE("rewrite_logprob") {
  const FeatureCatalog catalog = testutil::lab_catalog();

  SUBCASE("zero policy: any mask over 4 tuples scores 4 ln 0.5") {
    const PatientEHR p = testutil::single_visit_patient(
        "p1",
        {{"potassium", 4.1, 1}, {"sodium", 140.0, 2}, {"glucose", 5.0, 3}, {"glucose", 6.0, 4}});
    const RewriterPolicy policy;
    for (const auto& kept : std::vector<std::vector<std::uint32_t>>{
             {}, {0}, {1, 3}, {0, 1, 2, 3}}) {
      const Rewrite rw{"p1", kept, "test", std::nullopt};
      CHECK(rewrite_logprob(policy, p, rw, catalog) ==
            doctest::Approx(4.0 * std::log(0.5)).epsilon(1e-12));
    }
  }

  SUBCASE("mask probabilities sum to 1 over all 2^n masks") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> gauss(0.0, 1.5);
    for (int trial = 0; trial < 5; ++trial) {
      const int n = 4 + trial;  // up to 8 tuples
      const PatientEHR p = testutil::random_patient(rng, "p", n);
      RewriterPolicy policy = materialized_policy(p);
      for (auto& [_, v] : policy.feature_logits) v = gauss(rng);
      policy.w_recency = gauss(rng);
      policy.w_abnormal = gauss(rng);
      for (auto& w : policy.w_modality) w = gauss(rng);

      const std::size_t total = tuple_count(p);
      double mass = 0.0;
      for (std::uint64_t mask = 0; mask < (1ull << total); ++mask) {
        std::vector<std::uint32_t> kept;
        for (std::size_t j = 0; j < total; ++j) {
          if (mask & (1ull << j)) kept.push_back(j);
        }
        mass += std::exp(rewrite_logprob(policy, p, {"p", kept, "t", std::nullopt}, catalog));
      }
      CHECK(mass == doctest::Approx(1.0).epsilon(1e-9));
    }
  }

  SUBCASE("empty record scores 0") {
    PatientEHR p;
    p.patient_id = "p0";
    CHECK(rewrite_logprob(RewriterPolicy{}, p, {"p0", {}, "t", std::nullopt}, catalog) == 0.0);
  }

  SUBCASE("foreign rewrites are rejected") {
    const PatientEHR p = testutil::single_visit_patient("p1", {{"potassium", 4.1, 1}});
    CHECK_THROWS_AS(
        rewrite_logprob(RewriterPolicy{}, p, {"p1", {5}, "t", std::nullopt}, catalog),
        NotASubsetError);
    CHECK_THROWS_AS(
        rewrite_logprob(RewriterPolicy{}, p, {"p2", {0}, "t", std::nullopt}, catalog),
        NotASubsetError);
  }
}

TEST_CASE("sample_rewrites") {
  const FeatureCatalog catalog = testutil::lab_catalog();
  std::mt19937_64 rng(15);
  const PatientEHR p = testutil::random_patient(rng, "p1", 6);

  SUBCASE("a saturated policy returns the full record every time") {
    RewriterPolicy policy = materialized_policy(p);
    for (auto& [_, v] : policy.feature_logits) v = 50.0;
    for (const auto& rw : sample_rewrites(policy, p, catalog, 20, 3)) {
      CHECK(rw.kept.size() == tuple_count(p));
    }
  }

  SUBCASE("empirical inclusion frequency tracks q_j") {
    RewriterPolicy policy = materialized_policy(p);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (auto& [_, v] : policy.feature_logits) v = gauss(rng);
    const int n = 10000;
    const auto samples = sample_rewrites(policy, p, catalog, n, 77);
    std::vector<int> counts(tuple_count(p), 0);
    for (const auto& rw : samples) {
      for (std::uint32_t idx : rw.kept) counts[idx] += 1;
    }
    for (std::size_t j = 0; j < tuple_count(p); ++j) {
      const double q = tuple_q(policy, p, j, catalog);
      // all q_j here are far enough from 0 that the empty-mask guard does
      // not bias the frequencies beyond the stated tolerance
      CHECK(static_cast<double>(counts[j]) / n == doctest::Approx(q).epsilon(0.02 / q));
    }
  }

  SUBCASE("identical seeds reproduce identical samples with exact logprobs") {
    const RewriterPolicy policy;
    const auto a = sample_rewrites(policy, p, catalog, 8, 123);
    const auto b = sample_rewrites(policy, p, catalog, 8, 123);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].kept == b[i].kept);
      CHECK(*a[i].logprob == *b[i].logprob);
      CHECK(*a[i].logprob ==
            doctest::Approx(rewrite_logprob(policy, p, a[i], catalog)).epsilon(1e-12));
    }
  }

  SUBCASE("the empty-mask guard forces the highest-q tuple") {
    RewriterPolicy policy = materialized_policy(p);
    for (auto& [_, v] : policy.feature_logits) v = -50.0;
    policy.feature_logits[flatten_tuples(p)[2].feature] = -40.0;  // best of a bad lot
    for (const auto& rw : sample_rewrites(policy, p, catalog, 10, 5)) {
      CHECK(rw.kept.size() == 1);
    }
  }
}

TEST_CASE("mle_finetune") {
  const FeatureCatalog catalog = testutil::lab_catalog();

  SUBCASE("memorizes a single mask") {
    const PatientEHR p = testutil::single_visit_patient(
        "p1", {{"potassium", 4.1, 1}, {"sodium", 140.0, 2}});
    const std::vector<RewritePair> pairs = {{p, Rewrite{"p1", {0}, "t", std::nullopt}}};
    MleConfig cfg;
    cfg.learning_rate = 1.0;
    cfg.epochs = 400;
    const RewriterPolicy policy = mle_finetune(RewriterPolicy{}, pairs, catalog, cfg);
    CHECK(tuple_q(policy, p, 0, catalog) >= 0.95);
    CHECK(tuple_q(policy, p, 1, catalog) <= 0.05);
  }

  SUBCASE("training log-likelihood is non-decreasing at small steps") {
    std::mt19937_64 rng(31);
    std::vector<RewritePair> pairs;
    for (int i = 0; i < 6; ++i) {
      const PatientEHR p = testutil::random_patient(rng, "p" + std::to_string(i), 5);
      const auto samples = sample_rewrites(RewriterPolicy{}, p, catalog, 2, 100 + i);
      for (const auto& rw : samples) pairs.push_back({p, rw});
    }
    MleConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.epochs = 1;
    RewriterPolicy policy;
    double prev = mask_nll(policy, pairs, catalog);
    for (int epoch = 0; epoch < 40; ++epoch) {
      policy = mle_finetune(policy, pairs, catalog, cfg);
      const double nll = mask_nll(policy, pairs, catalog);
      CHECK(nll <= prev + 1e-6);
      prev = nll;
    }
  }

  SUBCASE("analytic gradient matches central finite differences") {
    std::mt19937_64 rng(41);
    std::normal_distribution<double> gauss(0.0, 0.8);
    for (int it = 0; it < 10; ++it) {
      const PatientEHR p = testutil::random_patient(rng, "p", 4 + it % 4);
      RewriterPolicy policy = materialized_policy(p);
      for (auto& [_, v] : policy.feature_logits) v = gauss(rng);
      policy.w_recency = gauss(rng);
      policy.w_abnormal = gauss(rng);
      for (auto& w : policy.w_modality) w = gauss(rng);

      std::vector<RewritePair> pairs;
      for (const auto& rw : sample_rewrites(policy, p, catalog, 3, 500 + it)) {
        pairs.push_back({p, rw});
      }
      PolicyGrad grad;
      const double inv = -1.0 / static_cast<double>(pairs.size());  // d(mean NLL)
      for (const auto& pair : pairs) {
        accumulate_logprob_grad(policy, pair.ehr, pair.rewrite, catalog, inv, grad);
      }
      const std::vector<double> analytic = grad.flat(policy);
      const std::vector<double> numeric = finite_diff_policy_grad(policy, pairs, catalog, 1e-5);
      CHECK(vector_rel_err(analytic, numeric) <= 1e-4);
    }
  }

  SUBCASE("empty dataset leaves the policy unchanged") {
    RewriterPolicy policy;
    policy.w_recency = 0.7;
    const RewriterPolicy out = mle_finetune(policy, {}, testutil::lab_catalog(), MleConfig{});
    CHECK(out.flat_params() == policy.flat_params());
  }
}

TEST_CASE("external_generate") {
  SUBCASE("echo mock returns n copies with logprobs") {
    httplib::Server server;
    server.Post("/generate", [](const httplib::Request& req, httplib::Response& res) {
      const auto body = nlohmann::json::parse(req.body);
      nlohmann::json out;
      out["texts"] = nlohmann::json::array();
      out["logprobs"] = nlohmann::json::array();
      for (int i = 0; i < body.at("n").get<int>(); ++i) {
        out["texts"].push_back(body.at("prompt").get<std::string>());
        out["logprobs"].push_back(-1.0 - i);
      }
      res.set_content(out.dump(), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    EndpointConfig endpoint;
    endpoint.host = "127.0.0.1";
    endpoint.port = port;
    const auto out = external_generate(endpoint, "rewrite this record", 2);
    server.stop();
    th.join();

    REQUIRE(out.size() == 2);
    CHECK(out[0].text == "rewrite this record");
    CHECK(*out[0].logprob == -1.0);
    CHECK(*out[1].logprob == -2.0);

    const auto weights = generation_weights(out);
    CHECK(weights[0] == doctest::Approx(std::exp(-1.0) / (std::exp(-1.0) + std::exp(-2.0)))
                            .epsilon(1e-9));
    CHECK(weights[0] == doctest::Approx(0.731).epsilon(1e-3));
    CHECK(weights[1] == doctest::Approx(0.269).epsilon(1e-3));
  }

  SUBCASE("unreachable endpoint raises EndpointUnavailable") {
    EndpointConfig endpoint;
    endpoint.host = "127.0.0.1";
    endpoint.port = 1;  // nothing listens there
    endpoint.timeout_sec = 1;
    CHECK_THROWS_AS(external_generate(endpoint, "x", 1), EndpointUnavailableError);
  }

  SUBCASE("malformed responses are rejected") {
    httplib::Server server;
    server.Post("/generate", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("not json", "text/plain");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    EndpointConfig endpoint;
    endpoint.host = "127.0.0.1";
    endpoint.port = port;
    CHECK_THROWS_AS(external_generate(endpoint, "x", 1), MalformedResponseError);
    server.stop();
    th.join();
  }

  SUBCASE("missing logprobs fall back to uniform weights") {
    const std::vector<GeneratedText> gens = {{"a", std::nullopt}, {"b", -1.0}, {"c", -2.0}};
    const auto weights = generation_weights(gens);
    for (double w : weights) CHECK(w == doctest::Approx(1.0 / 3).epsilon(1e-12));
  }
}
