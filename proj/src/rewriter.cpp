#include "ehrw/rewriter.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

#include "ehrw/rng.hpp"

namespace ehrw {

using nlohmann::json;

TupleContext tuple_context(const PatientEHR& ehr, std::size_t tuple_index,
                           const FeatureCatalog& catalog) {
  const std::vector<FeatureValueTuple> tuples = flatten_tuples(ehr);
  if (tuple_index >= tuples.size()) throw PreconditionError("tuple_context: index out of range");
  const FeatureValueTuple& fv = tuples[tuple_index];
  const CatalogEntry& entry = catalog.at(fv.feature);

  TupleContext ctx;
  const std::int64_t t_max = max_timestamp(ehr);
  ctx.recency = t_max > 0 ? static_cast<double>(fv.timestamp) / static_cast<double>(t_max) : 0.0;
  if (entry.reference_range && is_numeric(fv.value)) {
    const double v = std::get<double>(fv.value);
    ctx.abnormal =
        (v < entry.reference_range->first || v > entry.reference_range->second) ? 1.0 : 0.0;
  }
  ctx.modality = entry.modality;
  return ctx;
}

namespace {

// Contexts for all tuples in one pass; the hot path for logprob/sampling.
struct PreparedEhr {
  std::vector<FeatureValueTuple> tuples;
  std::vector<TupleContext> contexts;
};

PreparedEhr prepare(const PatientEHR& ehr, const FeatureCatalog& catalog) {
  PreparedEhr out;
  out.tuples = flatten_tuples(ehr);
  out.contexts.reserve(out.tuples.size());
  const std::int64_t t_max = max_timestamp(ehr);
  for (const auto& fv : out.tuples) {
    const CatalogEntry& entry = catalog.at(fv.feature);
    TupleContext ctx;
    ctx.recency = t_max > 0 ? static_cast<double>(fv.timestamp) / static_cast<double>(t_max) : 0.0;
    if (entry.reference_range && is_numeric(fv.value)) {
      const double v = std::get<double>(fv.value);
      ctx.abnormal =
          (v < entry.reference_range->first || v > entry.reference_range->second) ? 1.0 : 0.0;
    }
    ctx.modality = entry.modality;
    out.contexts.push_back(ctx);
  }
  return out;
}

double logit_of(const RewriterPolicy& policy, const FeatureValueTuple& fv,
                const TupleContext& ctx) {
  return policy.feature_logit(fv.feature) + policy.w_recency * ctx.recency +
         policy.w_abnormal * ctx.abnormal +
         policy.w_modality[static_cast<int>(ctx.modality)];
}

// log sigmoid(z) and log(1 - sigmoid(z)), numerically stable.
double log_q(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }
double log_1mq(double z) { return log_q(-z); }

}  // namespace

double tuple_logit(const RewriterPolicy& policy, const PatientEHR& ehr, std::size_t tuple_index,
                   const FeatureCatalog& catalog) {
  const std::vector<FeatureValueTuple> tuples = flatten_tuples(ehr);
  if (tuple_index >= tuples.size()) throw PreconditionError("tuple_logit: index out of range");
  return logit_of(policy, tuples[tuple_index], tuple_context(ehr, tuple_index, catalog));
}

double tuple_q(const RewriterPolicy& policy, const PatientEHR& ehr, std::size_t tuple_index,
               const FeatureCatalog& catalog) {
  return 1.0 / (1.0 + std::exp(-tuple_logit(policy, ehr, tuple_index, catalog)));
}

double rewrite_logprob(const RewriterPolicy& policy, const PatientEHR& ehr,
                       const Rewrite& rewrite, const FeatureCatalog& catalog) {
  if (rewrite.patient_id != ehr.patient_id) {
    throw NotASubsetError("rewrite of patient " + rewrite.patient_id + " scored against " +
                          ehr.patient_id);
  }
  const PreparedEhr prep = prepare(ehr, catalog);
  const std::size_t n = prep.tuples.size();
  std::vector<bool> mask(n, false);
  for (std::uint32_t idx : rewrite.kept) {
    if (idx >= n) {
      throw NotASubsetError("rewrite index " + std::to_string(idx) + " out of range (" +
                            std::to_string(n) + " tuples)");
    }
    mask[idx] = true;
  }
  double lp = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double z = logit_of(policy, prep.tuples[j], prep.contexts[j]);
    lp += mask[j] ? log_q(z) : log_1mq(z);
  }
  return lp;
}

std::vector<Rewrite> sample_rewrites(const RewriterPolicy& policy, const PatientEHR& ehr,
                                     const FeatureCatalog& catalog, int n, std::uint64_t seed) {
  if (n < 1) throw PreconditionError("sample_rewrites: n must be >= 1");
  const PreparedEhr prep = prepare(ehr, catalog);
  const std::size_t m = prep.tuples.size();

  std::vector<double> q(m), lq(m), l1mq(m);
  std::size_t best_tuple = 0;
  for (std::size_t j = 0; j < m; ++j) {
    const double z = logit_of(policy, prep.tuples[j], prep.contexts[j]);
    q[j] = 1.0 / (1.0 + std::exp(-z));
    lq[j] = log_q(z);
    l1mq[j] = log_1mq(z);
    if (q[j] > q[best_tuple]) best_tuple = j;
  }

  std::vector<Rewrite> out;
  out.reserve(n);
  Rng rng(make_rng(seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int s = 0; s < n; ++s) {
    std::vector<std::uint32_t> kept;
    for (int attempt = 0; attempt < 8; ++attempt) {
      kept.clear();
      for (std::size_t j = 0; j < m; ++j) {
        if (unit(rng) < q[j]) kept.push_back(static_cast<std::uint32_t>(j));
      }
      if (!kept.empty() || m == 0) break;
    }
    if (kept.empty() && m > 0) kept.push_back(static_cast<std::uint32_t>(best_tuple));

    double lp = 0.0;
    std::size_t ki = 0;
    for (std::size_t j = 0; j < m; ++j) {
      const bool in = ki < kept.size() && kept[ki] == j;
      if (in) ++ki;
      lp += in ? lq[j] : l1mq[j];
    }
    out.push_back(Rewrite{ehr.patient_id, std::move(kept), "policy", lp});
  }
  return out;
}

void PolicyGrad::axpy(double scale, const PolicyGrad& other) {
  for (const auto& [f, g] : other.d_feature) d_feature[f] += scale * g;
  d_recency += scale * other.d_recency;
  d_abnormal += scale * other.d_abnormal;
  for (int k = 0; k < kNumModalities; ++k) d_modality[k] += scale * other.d_modality[k];
}

std::vector<double> PolicyGrad::flat(const RewriterPolicy& reference) const {
  std::vector<double> out;
  out.reserve(2 + kNumModalities + reference.feature_logits.size());
  out.push_back(d_recency);
  out.push_back(d_abnormal);
  for (int k = 0; k < kNumModalities; ++k) out.push_back(d_modality[k]);
  for (const auto& [f, _] : reference.feature_logits) {
    auto it = d_feature.find(f);
    out.push_back(it == d_feature.end() ? 0.0 : it->second);
  }
  return out;
}

void accumulate_logprob_grad(const RewriterPolicy& policy, const PatientEHR& ehr,
                             const Rewrite& rewrite, const FeatureCatalog& catalog, double scale,
                             PolicyGrad& grad) {
  const PreparedEhr prep = prepare(ehr, catalog);
  const std::size_t n = prep.tuples.size();
  std::vector<bool> mask(n, false);
  for (std::uint32_t idx : rewrite.kept) {
    if (idx >= n) throw NotASubsetError("gradient: rewrite index out of range");
    mask[idx] = true;
  }
  // d logp / dz_j = m_j - q_j; z_j is linear in every parameter.
  for (std::size_t j = 0; j < n; ++j) {
    const double z = logit_of(policy, prep.tuples[j], prep.contexts[j]);
    const double qj = 1.0 / (1.0 + std::exp(-z));
    const double dz = ((mask[j] ? 1.0 : 0.0) - qj) * scale;
    grad.d_feature[prep.tuples[j].feature] += dz;
    grad.d_recency += dz * prep.contexts[j].recency;
    grad.d_abnormal += dz * prep.contexts[j].abnormal;
    grad.d_modality[static_cast<int>(prep.contexts[j].modality)] += dz;
  }
}

std::vector<double> RewriterPolicy::flat_params() const {
  std::vector<double> out;
  out.reserve(2 + kNumModalities + feature_logits.size());
  out.push_back(w_recency);
  out.push_back(w_abnormal);
  for (int k = 0; k < kNumModalities; ++k) out.push_back(w_modality[k]);
  for (const auto& [_, v] : feature_logits) out.push_back(v);
  return out;
}

void RewriterPolicy::set_flat_params(std::span<const double> params) {
  if (params.size() != 2 + kNumModalities + feature_logits.size()) {
    throw PreconditionError("set_flat_params: size mismatch");
  }
  std::size_t o = 0;
  w_recency = params[o++];
  w_abnormal = params[o++];
  for (int k = 0; k < kNumModalities; ++k) w_modality[k] = params[o++];
  for (auto& [_, v] : feature_logits) v = params[o++];
}

bool RewriterPolicy::params_finite() const {
  if (!std::isfinite(w_recency) || !std::isfinite(w_abnormal)) return false;
  for (double w : w_modality) {
    if (!std::isfinite(w)) return false;
  }
  for (const auto& [_, v] : feature_logits) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double mask_nll(const RewriterPolicy& policy, const std::vector<RewritePair>& pairs,
                const FeatureCatalog& catalog) {
  if (pairs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& pair : pairs) {
    total -= rewrite_logprob(policy, pair.ehr, pair.rewrite, catalog);
  }
  return total / static_cast<double>(pairs.size());
}

RewriterPolicy mle_finetune(const RewriterPolicy& policy, const std::vector<RewritePair>& pairs,
                            const FeatureCatalog& catalog, const MleConfig& config) {
  if (pairs.empty()) return policy;
  if (!(config.learning_rate > 0)) throw ConfigError("learning_rate must be > 0");

  RewriterPolicy out = policy;
  for (const auto& pair : pairs) {
    for (const auto& fv : flatten_tuples(pair.ehr)) {
      out.feature_logits.emplace(fv.feature, 0.0);
    }
  }

  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch =
      config.batch_size > 0 ? static_cast<std::size_t>(config.batch_size) : pairs.size();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.batch_size > 0) {
      Rng rng(derive_seed(config.rng_seed, "mle_epoch", epoch));
      std::shuffle(order.begin(), order.end(), rng);
    }
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      PolicyGrad grad;
      const double inv = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const auto& pair = pairs[order[i]];
        accumulate_logprob_grad(out, pair.ehr, pair.rewrite, catalog, inv, grad);
      }
      // Ascent on mean log-likelihood.
      for (const auto& [f, g] : grad.d_feature) out.feature_logits[f] += config.learning_rate * g;
      out.w_recency += config.learning_rate * grad.d_recency;
      out.w_abnormal += config.learning_rate * grad.d_abnormal;
      for (int k = 0; k < kNumModalities; ++k) {
        out.w_modality[k] += config.learning_rate * grad.d_modality[k];
      }
    }
    if (!out.params_finite()) {
      throw NonFiniteLossError("mle_finetune diverged at epoch " + std::to_string(epoch));
    }
  }
  return out;
}

void RewriterPolicy::save(const std::string& path) const {
  json j;
  j["format"] = "ehrw-policy-v1";
  j["rng_seed"] = rng_seed;
  j["w_recency"] = w_recency;
  j["w_abnormal"] = w_abnormal;
  j["w_modality"] = w_modality;
  json logits = json::object();
  for (const auto& [f, v] : feature_logits) logits[f] = v;
  j["feature_logits"] = logits;
  std::ofstream os(path);
  if (!os) throw Error("cannot open for write: " + path);
  os << j.dump(2) << "\n";
}

RewriterPolicy RewriterPolicy::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError(path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw Error("bad policy file " + path + ": " + e.what());
  }
  if (j.value("format", "") != "ehrw-policy-v1") {
    throw Error("bad policy file (format mismatch): " + path);
  }
  RewriterPolicy p;
  p.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  p.w_recency = j.at("w_recency").get<double>();
  p.w_abnormal = j.at("w_abnormal").get<double>();
  const auto& wm = j.at("w_modality");
  for (int k = 0; k < kNumModalities; ++k) p.w_modality[k] = wm.at(k).get<double>();
  for (const auto& [f, v] : j.at("feature_logits").items()) {
    p.feature_logits[f] = v.get<double>();
  }
  return p;
}

std::vector<double> generation_weights(const std::vector<GeneratedText>& generations) {
  const std::size_t n = generations.size();
  if (n == 0) return {};
  bool all_have = true;
  for (const auto& g : generations) all_have = all_have && g.logprob.has_value();
  if (!all_have) return std::vector<double>(n, 1.0 / static_cast<double>(n));

  double max_lp = -std::numeric_limits<double>::infinity();
  for (const auto& g : generations) max_lp = std::max(max_lp, *g.logprob);
  std::vector<double> w(n);
  double norm = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = std::exp(*generations[i].logprob - max_lp);
    norm += w[i];
  }
  for (auto& x : w) x /= norm;
  return w;
}

}  // namespace ehrw
