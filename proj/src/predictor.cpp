#include "ehrw/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include "ehrw/parallel.hpp"
#include "ehrw/rng.hpp"

namespace ehrw {

namespace {

constexpr char kBigramSep = '\x1e';

bool power_of_two(std::uint32_t x) { return x != 0 && (x & (x - 1)) == 0; }

std::vector<std::string> tokenize_lower(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!current.empty()) tokens.push_back(std::move(current)), current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

void add_ngram(std::map<std::uint32_t, double>& acc, std::string_view ngram,
               std::uint32_t hash_dim) {
  const std::uint64_t h = mix64(fnv1a64(ngram));
  const std::uint32_t bucket = static_cast<std::uint32_t>(h & (hash_dim - 1));
  const double sign = (h >> 63) ? -1.0 : 1.0;
  acc[bucket] += sign;
}

double clamped_log(double p) { return std::log(std::clamp(p, 1e-12, 1.0 - 1e-12)); }

}  // namespace

SparseVec encode_counts(std::string_view text, std::uint32_t hash_dim) {
  if (!power_of_two(hash_dim)) throw ConfigError("hash_dim must be a power of two");
  const std::vector<std::string> tokens = tokenize_lower(text);
  std::map<std::uint32_t, double> acc;
  for (const auto& t : tokens) add_ngram(acc, t, hash_dim);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    add_ngram(acc, tokens[i] + kBigramSep + tokens[i + 1], hash_dim);
  }
  SparseVec out;
  out.items.reserve(acc.size());
  for (const auto& [idx, v] : acc) {
    if (v != 0.0) out.items.emplace_back(idx, v);
  }
  return out;
}

SparseVec encode(std::string_view text, std::uint32_t hash_dim) {
  SparseVec v = encode_counts(text, hash_dim);
  double norm2 = 0.0;
  for (const auto& [_, x] : v.items) norm2 += x * x;
  if (norm2 > 0.0) {
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& [_, x] : v.items) x *= inv;
  }
  return v;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (patience > epochs) throw ConfigError("patience must be <= epochs");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

PredictorModel PredictorModel::zeros(std::uint32_t hash_dim, int hidden_units) {
  if (!power_of_two(hash_dim)) throw ConfigError("hash_dim must be a power of two");
  PredictorModel m;
  m.hash_dim_ = hash_dim;
  m.hidden_units_ = hidden_units;
  if (hidden_units > 0) {
    m.w1_.assign(static_cast<std::size_t>(hash_dim) * hidden_units, 0.0);
    m.b1_.assign(hidden_units, 0.0);
    m.w2_.assign(hidden_units, 0.0);
  } else {
    m.w2_.assign(hash_dim, 0.0);
  }
  return m;
}

PredictorModel PredictorModel::random_init(std::uint32_t hash_dim, int hidden_units,
                                           std::uint64_t seed) {
  PredictorModel m = zeros(hash_dim, hidden_units);
  m.meta_.rng_seed = seed;
  if (hidden_units > 0) {
    Rng rng(derive_seed(seed, "init"));
    std::normal_distribution<double> dist(0.0, 0.05);
    for (auto& w : m.w1_) w = dist(rng);
    for (auto& w : m.w2_) w = dist(rng);
  }
  return m;
}

double PredictorModel::predict_logit(const SparseVec& x) const {
  if (hidden_units_ == 0) {
    double z = b2_;
    for (const auto& [idx, v] : x.items) z += w2_[idx] * v;
    return z;
  }
  const int h = hidden_units_;
  std::vector<double> a(b1_);
  for (const auto& [idx, v] : x.items) {
    const double* col = &w1_[static_cast<std::size_t>(idx) * h];
    for (int k = 0; k < h; ++k) a[k] += col[k] * v;
  }
  double z = b2_;
  for (int k = 0; k < h; ++k) z += w2_[k] * std::tanh(a[k]);
  return z;
}

double PredictorModel::predict_proba_encoded(const SparseVec& x) const {
  return sigmoid(predict_logit(x));
}

double PredictorModel::predict_proba(std::string_view text) const {
  return predict_proba_encoded(encode(text, hash_dim_));
}

std::size_t PredictorModel::param_count() const {
  return w1_.size() + b1_.size() + w2_.size() + 1;
}

std::vector<double> PredictorModel::flat_params() const {
  std::vector<double> p;
  p.reserve(param_count());
  p.insert(p.end(), w1_.begin(), w1_.end());
  p.insert(p.end(), b1_.begin(), b1_.end());
  p.insert(p.end(), w2_.begin(), w2_.end());
  p.push_back(b2_);
  return p;
}

void PredictorModel::set_flat_params(std::span<const double> params) {
  if (params.size() != param_count()) throw PreconditionError("set_flat_params: size mismatch");
  std::size_t o = 0;
  std::copy_n(params.begin() + o, w1_.size(), w1_.begin()), o += w1_.size();
  std::copy_n(params.begin() + o, b1_.size(), b1_.begin()), o += b1_.size();
  std::copy_n(params.begin() + o, w2_.size(), w2_.begin()), o += w2_.size();
  b2_ = params[o];
}

bool PredictorModel::params_finite() const {
  auto ok = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  return ok(w1_) && ok(b1_) && ok(w2_) && std::isfinite(b2_);
}

double PredictorModel::bce_loss(std::span<const EncodedExample> batch,
                                std::vector<double>* grad) const {
  if (batch.empty()) return 0.0;
  if (grad) grad->assign(param_count(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const int h = hidden_units_;
  const std::size_t off_b1 = w1_.size();
  const std::size_t off_w2 = w1_.size() + b1_.size();
  const std::size_t off_b2 = off_w2 + w2_.size();

  double loss = 0.0;
  std::vector<double> a(std::max(h, 1));
  for (const auto& [x, y] : batch) {
    double z;
    if (h == 0) {
      z = b2_;
      for (const auto& [idx, v] : x.items) z += w2_[idx] * v;
    } else {
      std::copy(b1_.begin(), b1_.end(), a.begin());
      for (const auto& [idx, v] : x.items) {
        const double* col = &w1_[static_cast<std::size_t>(idx) * h];
        for (int k = 0; k < h; ++k) a[k] += col[k] * v;
      }
      z = b2_;
      for (int k = 0; k < h; ++k) z += w2_[k] * std::tanh(a[k]);
    }
    const double p = sigmoid(z);
    loss -= y ? clamped_log(p) : clamped_log(1.0 - p);
    if (!grad) continue;

    const double r = (p - y) * inv_n;  // d(mean BCE)/dz
    if (h == 0) {
      for (const auto& [idx, v] : x.items) (*grad)[off_w2 + idx] += r * v;
      (*grad)[off_b2] += r;
    } else {
      (*grad)[off_b2] += r;
      for (int k = 0; k < h; ++k) {
        const double th = std::tanh(a[k]);
        (*grad)[off_w2 + k] += r * th;
        const double dh = r * w2_[k] * (1.0 - th * th);
        (*grad)[off_b1 + k] += dh;
        for (const auto& [idx, v] : x.items) {
          (*grad)[static_cast<std::size_t>(idx) * h + k] += dh * v;
        }
      }
    }
  }
  return loss * inv_n;
}

void PredictorModel::apply_update(std::span<const double> grad, double learning_rate) {
  if (grad.size() != param_count()) throw PreconditionError("apply_update: size mismatch");
  std::size_t o = 0;
  for (auto& w : w1_) w -= learning_rate * grad[o++];
  for (auto& w : b1_) w -= learning_rate * grad[o++];
  for (auto& w : w2_) w -= learning_rate * grad[o++];
  b2_ -= learning_rate * grad[o];
}

namespace {

// One SGD step on a mini-batch using sparse accumulation; touches only the
// hash buckets present in the batch.
void sgd_step(PredictorModel& model, std::span<const EncodedExample* const> batch, double lr,
              std::vector<double>& w1, std::vector<double>& b1, std::vector<double>& w2,
              double& b2) {
  const int h = model.hidden_units();
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  if (h == 0) {
    std::map<std::uint32_t, double> gw;
    double gb = 0.0;
    for (const auto* ex : batch) {
      double z = b2;
      for (const auto& [idx, v] : ex->first.items) z += w2[idx] * v;
      const double r = (sigmoid(z) - ex->second) * inv_n;
      for (const auto& [idx, v] : ex->first.items) gw[idx] += r * v;
      gb += r;
    }
    for (const auto& [idx, g] : gw) w2[idx] -= lr * g;
    b2 -= lr * gb;
    return;
  }

  std::map<std::uint32_t, std::vector<double>> gw1;
  std::vector<double> gb1(h, 0.0), gw2(h, 0.0);
  double gb2 = 0.0;
  std::vector<double> a(h), th(h), dh(h);
  for (const auto* ex : batch) {
    std::copy(b1.begin(), b1.end(), a.begin());
    for (const auto& [idx, v] : ex->first.items) {
      const double* col = &w1[static_cast<std::size_t>(idx) * h];
      for (int k = 0; k < h; ++k) a[k] += col[k] * v;
    }
    double z = b2;
    for (int k = 0; k < h; ++k) {
      th[k] = std::tanh(a[k]);
      z += w2[k] * th[k];
    }
    const double r = (sigmoid(z) - ex->second) * inv_n;
    gb2 += r;
    for (int k = 0; k < h; ++k) {
      gw2[k] += r * th[k];
      dh[k] = r * w2[k] * (1.0 - th[k] * th[k]);
      gb1[k] += dh[k];
    }
    for (const auto& [idx, v] : ex->first.items) {
      auto& col = gw1[idx];
      if (col.empty()) col.assign(h, 0.0);
      for (int k = 0; k < h; ++k) col[k] += dh[k] * v;
    }
  }
  for (const auto& [idx, col] : gw1) {
    double* w = &w1[static_cast<std::size_t>(idx) * h];
    for (int k = 0; k < h; ++k) w[k] -= lr * col[k];
  }
  for (int k = 0; k < h; ++k) {
    b1[k] -= lr * gb1[k];
    w2[k] -= lr * gw2[k];
  }
  b2 -= lr * gb2;
}

double mean_bce(const PredictorModel& model, const std::vector<EncodedExample>& examples) {
  if (examples.empty()) return 0.0;
  double loss = 0.0;
  for (const auto& [x, y] : examples) {
    const double p = model.predict_proba_encoded(x);
    loss -= y ? clamped_log(p) : clamped_log(1.0 - p);
  }
  return loss / static_cast<double>(examples.size());
}

std::vector<EncodedExample> encode_examples(const std::vector<Example>& examples,
                                            std::uint32_t hash_dim) {
  std::vector<EncodedExample> out(examples.size());
  parallel_for(examples.size(), [&](std::size_t i) {
    out[i] = {encode(examples[i].first, hash_dim), examples[i].second};
  });
  return out;
}

PredictorModel run_gd(PredictorModel model, const std::vector<EncodedExample>& train_set,
                      const std::vector<EncodedExample>& val_set, const TrainConfig& config,
                      bool early_stop) {
  // sgd_step mutates the parameter vectors through these views.
  std::vector<double> params = model.flat_params();
  PredictorModel best = model;
  double best_val = std::numeric_limits<double>::infinity();
  int since_improve = 0;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  const int h = model.hidden_units();
  const std::size_t nw1 = h > 0 ? static_cast<std::size_t>(model.hash_dim()) * h : 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng rng(derive_seed(config.rng_seed, "epoch", epoch));
    std::shuffle(order.begin(), order.end(), rng);

    // Views into the flat parameter buffer.
    std::vector<double> w1(params.begin(), params.begin() + nw1);
    std::vector<double> b1(params.begin() + nw1, params.begin() + nw1 + (h > 0 ? h : 0));
    std::vector<double> w2(params.begin() + nw1 + (h > 0 ? h : 0), params.end() - 1);
    double b2 = params.back();

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<const EncodedExample*> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) batch.push_back(&train_set[order[i]]);
      sgd_step(model, batch, config.learning_rate, w1, b1, w2, b2);
    }

    std::copy(w1.begin(), w1.end(), params.begin());
    std::copy(b1.begin(), b1.end(), params.begin() + nw1);
    std::copy(w2.begin(), w2.end(), params.begin() + nw1 + (h > 0 ? h : 0));
    params.back() = b2;
    model.set_flat_params(params);

    const double train_loss = mean_bce(model, train_set);
    if (!std::isfinite(train_loss)) {
      throw NonFiniteLossError("training loss diverged at epoch " + std::to_string(epoch) +
                               " (learning rate too high?)");
    }
    const double val_loss = val_set.empty() ? train_loss : mean_bce(model, val_set);
    model.meta().epochs_run = epoch + 1;
    if (val_loss < best_val) {
      best_val = val_loss;
      best = model;
      best.meta().best_val_loss = best_val;
      since_improve = 0;
    } else {
      ++since_improve;
      if (early_stop && since_improve >= config.patience) break;
    }
  }
  best.meta().best_val_loss = best_val;
  return best;
}

}  // namespace

PredictorModel train(const std::vector<Example>& examples, const TrainConfig& config,
                     const std::vector<Example>& val_examples, std::uint32_t hash_dim,
                     int hidden_units) {
  config.validate();
  if (examples.empty()) throw DegenerateLabelsError("no training examples");
  bool has0 = false, has1 = false;
  for (const auto& [_, y] : examples) (y ? has1 : has0) = true;
  if (!has0 || !has1) throw DegenerateLabelsError("need both classes in training examples");

  const std::vector<EncodedExample> train_set = encode_examples(examples, hash_dim);
  const std::vector<EncodedExample> val_set = encode_examples(val_examples, hash_dim);

  PredictorModel model = hidden_units > 0
                             ? PredictorModel::random_init(hash_dim, hidden_units, config.rng_seed)
                             : PredictorModel::zeros(hash_dim, hidden_units);
  model.meta().rng_seed = config.rng_seed;
  return run_gd(std::move(model), train_set, val_set, config, /*early_stop=*/true);
}

PredictorModel inoculate(const PredictorModel& model, const std::vector<Example>& rewrite_examples,
                         const TrainConfig& base_config, double lr_scale,
                         std::size_t max_samples) {
  base_config.validate();
  if (rewrite_examples.empty()) return model;

  std::vector<Example> sample = rewrite_examples;
  if (sample.size() > max_samples) {
    Rng rng(derive_seed(base_config.rng_seed, "inoculate"));
    std::shuffle(sample.begin(), sample.end(), rng);
    sample.resize(max_samples);
  }
  TrainConfig config = base_config;
  config.learning_rate = base_config.learning_rate * lr_scale;

  const std::vector<EncodedExample> train_set = encode_examples(sample, model.hash_dim());
  PredictorModel out = run_gd(model, train_set, {}, config, /*early_stop=*/false);
  if (!out.params_finite()) throw NonFiniteLossError("inoculation produced non-finite weights");
  return out;
}

std::vector<double> batch_predict_proba(const PredictorModel& model,
                                        const std::vector<std::string>& texts) {
  std::vector<double> out(texts.size());
  parallel_for(texts.size(), [&](std::size_t i) { out[i] = model.predict_proba(texts[i]); });
  return out;
}

std::vector<double> batch_predict_proba_serial(const PredictorModel& model,
                                               const std::vector<std::string>& texts) {
  std::vector<double> out(texts.size());
  serial_for(texts.size(), [&](std::size_t i) { out[i] = model.predict_proba(texts[i]); });
  return out;
}

std::vector<SparseVec> batch_encode(const std::vector<std::string>& texts,
                                    std::uint32_t hash_dim) {
  std::vector<SparseVec> out(texts.size());
  parallel_for(texts.size(), [&](std::size_t i) { out[i] = encode(texts[i], hash_dim); });
  return out;
}

std::vector<SparseVec> batch_encode_serial(const std::vector<std::string>& texts,
                                           std::uint32_t hash_dim) {
  std::vector<SparseVec> out(texts.size());
  serial_for(texts.size(), [&](std::size_t i) { out[i] = encode(texts[i], hash_dim); });
  return out;
}

namespace {
constexpr char kMagic[9] = "EHRWPM01";

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
void read_pod(std::istream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
}
void write_vec(std::ostream& os, const std::vector<double>& v) {
  const std::uint64_t n = v.size();
  write_pod(os, n);
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(n * 8));
}
std::vector<double> read_vec(std::istream& is) {
  std::uint64_t n = 0;
  read_pod(is, n);
  std::vector<double> v(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * 8));
  return v;
}
}  // namespace

void PredictorModel::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open for write: " + path);
  os.write(kMagic, 8);
  write_pod(os, hash_dim_);
  write_pod(os, hidden_units_);
  write_pod(os, meta_.rng_seed);
  write_pod(os, meta_.epochs_run);
  write_pod(os, meta_.best_val_loss);
  write_vec(os, w1_);
  write_vec(os, b1_);
  write_vec(os, w2_);
  write_pod(os, b2_);
  if (!os) throw Error("write failed: " + path);
}

PredictorModel PredictorModel::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError(path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) {
    throw Error("bad model file (magic mismatch): " + path);
  }
  PredictorModel m;
  read_pod(is, m.hash_dim_);
  read_pod(is, m.hidden_units_);
  read_pod(is, m.meta_.rng_seed);
  read_pod(is, m.meta_.epochs_run);
  read_pod(is, m.meta_.best_val_loss);
  m.w1_ = read_vec(is);
  m.b1_ = read_vec(is);
  m.w2_ = read_vec(is);
  read_pod(is, m.b2_);
  if (!is) throw Error("truncated model file: " + path);
  return m;
}

}  // namespace ehrw
