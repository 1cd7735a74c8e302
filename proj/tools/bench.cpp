// Times the OpenMP kernels against their serial reference implementations
// on a synthetic cohort and checks that both paths agree.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "ehrw/experiment.hpp"
#include "ehrw/parallel.hpp"

using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(const char* name, double serial_s, double parallel_s, bool equal) {
  std::printf("%-24s serial %8.3fs   openmp %8.3fs   speedup %5.2fx   %s\n", name, serial_s,
              parallel_s, serial_s / parallel_s, equal ? "outputs equal" : "OUTPUTS DIFFER");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"serial vs OpenMP kernel benchmark"};
  int n_patients = 2000;
  int n_bootstrap = 2000;
  int threads = 0;
  app.add_option("--patients", n_patients, "cohort size");
  app.add_option("--bootstrap", n_bootstrap, "bootstrap iterations");
  app.add_option("--threads", threads, "worker thread cap (0 = OpenMP default)");
  CLI11_PARSE(app, argc, argv);
  if (threads > 0) ehrw::set_max_threads(threads);

  std::printf("worker threads: %d\n", ehrw::effective_threads());

  ehrw::CohortSpec spec;
  spec.n_patients = n_patients;
  spec.seed = 7;
  const ehrw::GeneratedCohort gen = ehrw::generate_cohort(spec, "mor");
  const ehrw::TaskView view = ehrw::make_task_view(gen.cohort, "mor");

  std::vector<std::string> texts;
  texts.reserve(view.patients.size());
  for (const auto& p : view.patients) texts.push_back(ehrw::verbalize(p, gen.catalog).text);

  // encoding
  {
    auto t0 = Clock::now();
    const auto serial = ehrw::batch_encode_serial(texts, 1u << 16);
    const double ts = seconds_since(t0);
    t0 = Clock::now();
    const auto parallel = ehrw::batch_encode(texts, 1u << 16);
    const double tp = seconds_since(t0);
    bool equal = serial.size() == parallel.size();
    for (std::size_t i = 0; equal && i < serial.size(); ++i) {
      equal = serial[i].items == parallel[i].items;
    }
    report("batch_encode", ts, tp, equal);
  }

  // candidate rewrites
  std::vector<std::uint32_t> ids(view.patients.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::uint32_t>(i);
  ehrw::OperatorConfig op_cfg;
  op_cfg.rng_seed = 11;
  {
    auto t0 = Clock::now();
    const auto serial = ehrw::build_candidate_rewrites_serial(view, ids, gen.catalog, op_cfg);
    const double ts = seconds_since(t0);
    t0 = Clock::now();
    const auto parallel = ehrw::build_candidate_rewrites(view, ids, gen.catalog, op_cfg);
    const double tp = seconds_since(t0);
    bool equal = serial.items.size() == parallel.items.size();
    for (std::size_t i = 0; equal && i < serial.items.size(); ++i) {
      for (int op = 0; equal && op < ehrw::kNumOperators; ++op) {
        equal = serial.items[i].rewrites[op].kept == parallel.items[i].rewrites[op].kept;
      }
    }
    report("candidate_rewrites", ts, tp, equal);
  }

  // batch scoring
  ehrw::TrainConfig train_cfg;
  train_cfg.epochs = 2;
  train_cfg.patience = 2;
  train_cfg.learning_rate = 0.5;
  std::vector<ehrw::Example> examples;
  for (std::size_t i = 0; i < texts.size(); ++i) examples.emplace_back(texts[i], view.labels[i]);
  const ehrw::PredictorModel model = ehrw::train(examples, train_cfg, {}, 1u << 16, 16);
  {
    auto t0 = Clock::now();
    const auto serial = ehrw::batch_predict_proba_serial(model, texts);
    const double ts = seconds_since(t0);
    t0 = Clock::now();
    const auto parallel = ehrw::batch_predict_proba(model, texts);
    const double tp = seconds_since(t0);
    report("batch_predict_proba", ts, tp, serial == parallel);
  }

  // ensemble inference
  ehrw::RewriterPolicy policy;
  ehrw::InferenceConfig infer;
  infer.alpha = 0.5;
  infer.n_rewrites = 8;
  infer.seed = 13;
  {
    auto t0 = Clock::now();
    const auto serial =
        ehrw::ensemble_predict_batch_serial(model, policy, view.patients, gen.catalog, infer);
    const double ts = seconds_since(t0);
    t0 = Clock::now();
    const auto parallel =
        ehrw::ensemble_predict_batch(model, policy, view.patients, gen.catalog, infer);
    const double tp = seconds_since(t0);
    report("ensemble_predict", ts, tp, serial == parallel);
  }

  // bootstrap
  {
    const auto scores = ehrw::batch_predict_proba(model, texts);
    auto t0 = Clock::now();
    const auto serial = ehrw::bootstrap_metrics_serial(scores, view.labels, n_bootstrap, 17);
    const double ts = seconds_since(t0);
    t0 = Clock::now();
    const auto parallel = ehrw::bootstrap_metrics(scores, view.labels, n_bootstrap, 17);
    const double tp = seconds_since(t0);
    const bool equal = serial.auroc == parallel.auroc && serial.auprc == parallel.auprc &&
                       serial.auroc_std == parallel.auroc_std;
    report("bootstrap_metrics", ts, tp, equal);
  }
  return 0;
}
