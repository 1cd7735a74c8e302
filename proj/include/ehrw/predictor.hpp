#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ehrw/types.hpp"

namespace ehrw {

// Sparse feature vector; indices sorted and unique.
struct SparseVec {
  std::vector<std::pair<std::uint32_t, double>> items;
};

// Signed feature hashing of lowercase unigrams + adjacent bigrams.
// `encode_counts` gives the raw signed counts, `encode` L2-normalizes them.
// hash_dim must be a power of two.
SparseVec encode_counts(std::string_view text, std::uint32_t hash_dim);
SparseVec encode(std::string_view text, std::uint32_t hash_dim);

struct TrainConfig {
  double learning_rate = 0.2;
  int epochs = 10;
  int patience = 3;
  int batch_size = 32;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

struct TrainingMeta {
  int epochs_run = 0;
  double best_val_loss = 0.0;
  std::uint64_t rng_seed = 0;
};

using Example = std::pair<std::string, int>;          // (text, label)
using EncodedExample = std::pair<SparseVec, int>;

// Hashed-text classifier: optional tanh hidden layer (hidden_units == 0
// degrades to logistic regression) over the hashed n-gram vector, sigmoid
// head. All parameters are doubles so gradients are finite-difference
// checkable.
class PredictorModel {
 public:
  PredictorModel() = default;
  static PredictorModel zeros(std::uint32_t hash_dim, int hidden_units);
  static PredictorModel random_init(std::uint32_t hash_dim, int hidden_units, std::uint64_t seed);

  std::uint32_t hash_dim() const { return hash_dim_; }
  int hidden_units() const { return hidden_units_; }
  const TrainingMeta& meta() const { return meta_; }
  TrainingMeta& meta() { return meta_; }

  double predict_logit(const SparseVec& x) const;
  double predict_proba_encoded(const SparseVec& x) const;
  double predict_proba(std::string_view text) const;

  // Mean BCE over the batch; accumulates d(mean BCE)/d(params) into `grad`
  // (same layout as flat_params) when non-null.
  double bce_loss(std::span<const EncodedExample> batch, std::vector<double>* grad) const;

  void apply_update(std::span<const double> grad, double learning_rate);

  std::vector<double> flat_params() const;
  void set_flat_params(std::span<const double> params);
  std::size_t param_count() const;
  bool params_finite() const;

  void save(const std::string& path) const;
  static PredictorModel load(const std::string& path);

 private:
  std::uint32_t hash_dim_ = 0;
  int hidden_units_ = 0;
  // hidden > 0: w1_ column-major [bucket * hidden + h], b1_[hidden],
  // w2_[hidden], b2_. hidden == 0: w2_[hash_dim], b2_.
  std::vector<double> w1_, b1_, w2_;
  double b2_ = 0.0;
  TrainingMeta meta_;
};

// Mini-batch gradient descent on BCE with early stopping on validation BCE
// (patience consecutive non-improving epochs); returns the best-validation
// checkpoint. With no validation examples the epoch training loss stands in.
// Deterministic per rng_seed. Throws DegenerateLabelsError / NonFiniteLossError.
PredictorModel train(const std::vector<Example>& examples, const TrainConfig& config,
                     const std::vector<Example>& val_examples = {},
                     std::uint32_t hash_dim = 1u << 16, int hidden_units = 32);

// Continues training from `model`, scaling the learning rate down and
// bounding the sample (seeded subsample above max_samples). Empty input
// returns the model unchanged.
PredictorModel inoculate(const PredictorModel& model, const std::vector<Example>& rewrite_examples,
                         const TrainConfig& base_config, double lr_scale = 0.1,
                         std::size_t max_samples = 512);

// Batch scoring kernel (OpenMP) and its serial reference.
std::vector<double> batch_predict_proba(const PredictorModel& model,
                                        const std::vector<std::string>& texts);
std::vector<double> batch_predict_proba_serial(const PredictorModel& model,
                                               const std::vector<std::string>& texts);

// Batch encoding kernel (OpenMP) and its serial reference.
std::vector<SparseVec> batch_encode(const std::vector<std::string>& texts, std::uint32_t hash_dim);
std::vector<SparseVec> batch_encode_serial(const std::vector<std::string>& texts,
                                           std::uint32_t hash_dim);

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace ehrw
