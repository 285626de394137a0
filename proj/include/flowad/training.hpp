#pragma once

// Maximum-likelihood training with optional outlier or margin losses on
// samples from a more general distribution, scored against a frozen model
// of that distribution.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "flowad/autodiff.hpp"
#include "flowad/data.hpp"
#include "flowad/errors.hpp"
#include "flowad/eval.hpp"
#include "flowad/model.hpp"

namespace flowad {

enum class LossKind { NllOnly, NllPlusOutlier, NllPlusMargin };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::NllOnly: return "nll_only";
    case LossKind::NllPlusOutlier: return "nll_plus_outlier";
    case LossKind::NllPlusMargin: return "nll_plus_margin";
  }
  return "?";
}

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "nll_only") return LossKind::NllOnly;
  if (s == "nll_plus_outlier") return LossKind::NllPlusOutlier;
  if (s == "nll_plus_margin") return LossKind::NllPlusMargin;
  throw ConfigError("unknown loss kind '" + s + "'");
}

struct TrainConfig {
  double learning_rate = 5e-4;
  double weight_decay = 5e-5;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  double temperature = 1000.0;
  double outlier_weight = 6000.0;  // lambda
  double margin = 50.0;            // nats, margin loss only
  LossKind loss = LossKind::NllOnly;
  bool dequantize = true;
  bool augment_translate = false;
  std::size_t max_shift = 2;
  bool augment_flip = false;
  bool supervised = false;  // class-conditional NLL (needs a mixture prior and labels)
  std::size_t init_batch = 512;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (!(outlier_weight >= 0.0)) throw ConfigError("outlier weight must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
    if (batch_size == 0) throw ConfigError("batch size must be >= 1");
    if (!std::isfinite(margin)) throw ConfigError("margin must be finite");
  }
};

// ---------------------------------------------------------------------------
// Scalar losses

/// Continuous log-density in nats -> discrete code length per dimension
/// for 256-level data.
inline double bits_per_dim(double logp, std::size_t dims) {
  if (dims == 0) throw ContractError("bits_per_dim needs D > 0");
  return -logp / (static_cast<double>(dims) * std::numbers::ln2) + 8.0;
}

/// -lambda * ln sigmoid((log p_g(x_g) - log p_in(x_g)) / T).
inline double outlier_loss(double logp_in_g, double logp_g_g, double temperature, double weight) {
  if (!(temperature > 0.0)) throw ContractError("temperature must be > 0");
  return -weight * ad::detail::log_sigmoid_scalar((logp_g_g - logp_in_g) / temperature);
}

/// Hinge max(0, M + log p_in(x_g) - reference), reference being the mean
/// inlier log-likelihood of the batch.
inline double margin_loss(double logp_in_g, double margin, double reference) {
  return std::max(0.0, margin + logp_in_g - reference);
}

/// Per-example outlier loss with gradient through log p_in(x_g).
inline Var outlier_loss(const Var& logp_in_g, const Tensor& logp_g_g, double temperature, double weight) {
  Var logit = ad::scale(ad::sub(Var(logp_g_g), logp_in_g), 1.0 / temperature);
  return ad::scale(ad::log_sigmoid(logit), -weight);
}

// ---------------------------------------------------------------------------
// Stabilization

struct StabilizeResult {
  bool skip = false;               // drop the whole minibatch
  std::vector<std::size_t> kept;   // indices with finite log-likelihood
};

/// Removes non-finite entries; more than 75% removed skips the batch.
inline StabilizeResult stabilize_batch(const std::vector<double>& per_example_logp) {
  if (per_example_logp.empty()) throw ContractError("stabilize_batch on an empty batch");
  StabilizeResult r;
  for (std::size_t i = 0; i < per_example_logp.size(); ++i)
    if (std::isfinite(per_example_logp[i])) r.kept.push_back(i);
  const std::size_t dropped = per_example_logp.size() - r.kept.size();
  r.skip = 4 * dropped > 3 * per_example_logp.size();
  return r;
}

// ---------------------------------------------------------------------------
// Adamax

struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> u;
};

/// One Adamax step over `params`, using their accumulated gradients.
inline void optimizer_step(OptimizerState& state, const std::vector<Parameter*>& params, double lr,
                           double weight_decay) {
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.emplace_back(p->value().shape(), 0.0);
      state.u.emplace_back(p->value().shape(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("optimizer state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->value().shape() != state.m[i].shape()) throw ShapeError("optimizer state shape mismatch");
    if (!params[i]->grad().all_finite()) throw NumericsError("non-finite gradient in " + params[i]->name());
  }
  ++state.t;
  const double bias = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& value = params[i]->mutable_value();
    const Tensor& grad = params[i]->grad();
    Tensor& m = state.m[i];
    Tensor& u = state.u[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad[j] + weight_decay * value[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      u[j] = std::max(state.beta2 * u[j], std::abs(g));
      value[j] -= lr * (m[j] / bias) / (u[j] + state.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Likelihood helpers

/// Mean -log p over the batch, in nats per example. The batch is
/// preprocessed; with `dequantize`, U[0, 1/256) noise is added first.
template <class Rng>
double nll_loss(FlowModel& model, const Tensor& batch, bool dequantize, Rng& rng) {
  Tensor x = batch;
  if (dequantize) {
    std::uniform_real_distribution<double> u(0.0, kPixelBin);
    for (double& v : x.data()) v += u(rng);
  }
  const Tensor lp = model.log_prob(x);
  return -lp.sum() / static_cast<double>(lp.size());
}

inline double nll_loss(FlowModel& model, const Tensor& batch) {
  std::mt19937_64 unused(0);
  return nll_loss(model, batch, false, unused);
}

/// Per-example log p over a dataset, evaluated in batches without graphs.
template <class Rng>
std::vector<double> dataset_log_prob(FlowModel& model, const LabeledDataset& ds, Noise noise, Rng& rng,
                                     std::size_t batch = 64) {
  std::vector<double> out;
  out.reserve(ds.size());
  for (std::size_t b = 0; b < ds.size(); b += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b; i < std::min(ds.size(), b + batch); ++i) idx.push_back(i);
    Tensor lp = model.log_prob(preprocess_batch(ds, idx, noise, rng));
    out.insert(out.end(), lp.values().begin(), lp.values().end());
  }
  return out;
}

inline std::vector<double> dataset_log_prob(FlowModel& model, const LabeledDataset& ds, Noise noise = Noise::HalfBin) {
  std::mt19937_64 unused(0);
  if (noise == Noise::Dequantize) throw ContractError("dequantized evaluation needs an RNG");
  return dataset_log_prob(model, ds, noise, unused);
}

/// Mean bits/dim over a dataset.
template <class Rng>
double dataset_bpd(FlowModel& model, const LabeledDataset& ds, Noise noise, Rng& rng) {
  auto lp = dataset_log_prob(model, ds, noise, rng);
  double s = 0.0;
  for (double v : lp) s += v;
  return bits_per_dim(s / static_cast<double>(lp.size()), model.input_dim());
}

inline double dataset_bpd(FlowModel& model, const LabeledDataset& ds, Noise noise = Noise::HalfBin) {
  if (noise == Noise::Dequantize) throw ContractError("dequantized evaluation needs an RNG");
  std::mt19937_64 unused(0);
  return dataset_bpd(model, ds, noise, unused);
}

// ---------------------------------------------------------------------------
// Training loop

struct HistoryRecord {
  std::size_t epoch = 0;
  std::string split;
  std::string metric;
  double value = 0.0;
};

struct History {
  std::uint64_t seed = 0;
  std::vector<HistoryRecord> records;

  void add(std::size_t epoch, std::string split, std::string metric, double v) {
    records.push_back({epoch, std::move(split), std::move(metric), v});
  }

  std::vector<double> series(const std::string& metric, const std::string& split = "train") const {
    std::vector<double> out;
    for (const auto& r : records)
      if (r.metric == metric && r.split == split) out.push_back(r.value);
    return out;
  }

  /// One `epoch split metric value` line per record.
  void write(std::ostream& os) const {
    for (const auto& r : records) os << r.epoch << ' ' << r.split << ' ' << r.metric << ' ' << format_double(r.value) << '\n';
  }
};

namespace detail {

template <class Rng>
std::vector<std::uint8_t> augment_image(const LabeledDataset& ds, std::size_t i, const TrainConfig& cfg, Rng& rng) {
  const auto& src = ds.images[i];
  if (!cfg.augment_translate && !cfg.augment_flip) return src;
  const long h = static_cast<long>(ds.height), w = static_cast<long>(ds.width);
  long dy = 0, dx = 0;
  if (cfg.augment_translate) {
    std::uniform_int_distribution<long> shift(-static_cast<long>(cfg.max_shift), static_cast<long>(cfg.max_shift));
    dy = shift(rng);
    dx = shift(rng);
  }
  bool flip = false;
  if (cfg.augment_flip) flip = std::bernoulli_distribution(0.5)(rng);
  std::vector<std::uint8_t> out(src.size(), 0);
  for (std::size_t c = 0; c < ds.channels; ++c)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        const long sy = y - dy;
        long sx = x - dx;
        if (flip) sx = w - 1 - sx;
        if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
        out[(c * h + y) * w + x] = src[(c * h + sy) * w + sx];
      }
  return out;
}

template <class Rng>
Tensor training_batch(const LabeledDataset& ds, const std::vector<std::size_t>& idx, const TrainConfig& cfg,
                      Rng& rng) {
  LabeledDataset view;
  view.channels = ds.channels;
  view.height = ds.height;
  view.width = ds.width;
  for (std::size_t i : idx) view.push_back(augment_image(ds, i, cfg, rng));
  return preprocess_batch(view, all_indices(view), cfg.dequantize ? Noise::Dequantize : Noise::None, rng);
}

}  // namespace detail

/// Everything needed to compute the training objective on one minibatch.
struct LossInputs {
  Tensor x;                    // preprocessed inlier batch
  std::vector<int> labels;     // supervised only
  Tensor x_general;            // general-distribution batch (outlier/margin losses)
  Tensor logp_general_model;   // frozen general model on x_general
  Tensor logp_general_on_x;    // frozen general model on x (supervised outlier loss)
};

struct LossValue {
  Var total;
  double nll = 0.0;
  double aux = 0.0;  // outlier or margin term, already weighted
  bool skipped = false;
};

namespace detail {

/// Rows `keep` of a batch-major tensor.
inline Tensor select_rows(const Tensor& t, const std::vector<std::size_t>& keep) {
  Shape shape = t.shape();
  const std::size_t per = shape[0] ? t.size() / shape[0] : 0;
  shape[0] = keep.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < keep.size(); ++i)
    std::copy_n(t.data().begin() + static_cast<long>(keep[i] * per), per,
                out.data().begin() + static_cast<long>(i * per));
  return out;
}

/// Per-example objective log-likelihoods: log p(x), or log p(x | label)
/// in the supervised setting. `cls` receives the [N, K] class table.
inline Var target_log_prob(FlowModel& model, const Encoding& enc, const std::vector<int>& labels, bool supervised,
                           Var* cls) {
  if (!supervised) return enc.log_prob;
  const std::size_t n = enc.log_prob.size();
  if (labels.size() != n) throw ConfigError("supervised training needs a label per example");
  *cls = model.class_log_likelihoods(enc);
  const std::size_t k = cls->shape()[1];
  auto idx = std::make_shared<std::vector<std::size_t>>();
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) throw ConfigError("label out of range for mixture prior");
    idx->push_back(i * k + static_cast<std::size_t>(labels[i]));
  }
  return ad::gather_flat(*cls, Shape{n}, idx);
}

}  // namespace detail

/// Builds the differentiable objective for `model`. Non-finite examples are
/// dropped and the rest re-encoded, so no NaN reaches the gradients; a
/// batch losing more than 75% is reported as skipped.
inline LossValue compute_loss(FlowModel& model, const LossInputs& input, const TrainConfig& cfg) {
  LossValue out;
  LossInputs in = input;
  Var cls;
  Var logp = detail::target_log_prob(model, model.encode_var(Var(in.x)), in.labels, cfg.supervised, &cls);
  auto st = stabilize_batch(logp.value().values());
  if (st.skip) {
    out.skipped = true;
    return out;
  }
  if (st.kept.size() < in.x.dim(0)) {
    in.x = detail::select_rows(in.x, st.kept);
    if (cfg.supervised) {
      std::vector<int> labels;
      for (std::size_t i : st.kept) labels.push_back(in.labels[i]);
      in.labels = std::move(labels);
    }
    if (in.logp_general_on_x.size() == input.x.dim(0)) in.logp_general_on_x = detail::select_rows(in.logp_general_on_x, st.kept);
    logp = detail::target_log_prob(model, model.encode_var(Var(in.x)), in.labels, cfg.supervised, &cls);
  }
  const std::size_t n = in.x.dim(0);
  Var nll = ad::neg(ad::mean(logp));
  out.nll = nll.item();
  out.total = nll;
  if (cfg.loss == LossKind::NllOnly) return out;

  Var logp_in_g = model.encode_var(Var(in.x_general)).log_prob;
  std::vector<double> joint(logp_in_g.size());
  for (std::size_t i = 0; i < joint.size(); ++i) {
    const double a = logp_in_g.value()[i], b = in.logp_general_model[i];
    joint[i] = std::isfinite(a) && std::isfinite(b) ? a : NAN;
  }
  auto gst = stabilize_batch(joint);
  if (gst.skip) {
    out.skipped = true;
    return out;
  }
  Tensor lg = in.logp_general_model;
  if (gst.kept.size() < joint.size()) {
    lg = detail::select_rows(lg, gst.kept);
    logp_in_g = model.encode_var(Var(detail::select_rows(in.x_general, gst.kept))).log_prob;
  }
  Var aux;
  if (cfg.loss == LossKind::NllPlusOutlier) {
    aux = ad::mean(outlier_loss(logp_in_g, lg, cfg.temperature, cfg.outlier_weight));
    if (cfg.supervised && in.logp_general_on_x.size() == n) {
      // Every mode also treats the other classes' inliers as negatives.
      const std::size_t k = cls.shape()[1];
      auto idx = std::make_shared<std::vector<std::size_t>>();
      std::vector<double> ref;
      for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(in.logp_general_on_x[i])) continue;
        for (std::size_t c = 0; c < k; ++c) {
          if (static_cast<int>(c) == in.labels[i]) continue;
          idx->push_back(i * k + c);
          ref.push_back(in.logp_general_on_x[i]);
        }
      }
      if (!idx->empty()) {
        Var other = ad::gather_flat(cls, Shape{idx->size()}, idx);
        Tensor lref(Shape{ref.size()}, ref);
        aux = ad::add(aux, ad::mean(outlier_loss(other, lref, cfg.temperature, cfg.outlier_weight)));
      }
    }
  } else {
    Var reference = ad::mean(logp);
    Var hinge = ad::relu(ad::sub(ad::add_scalar(logp_in_g, cfg.margin), reference));
    aux = ad::scale(ad::mean(hinge), cfg.outlier_weight);
  }
  out.aux = aux.item();
  out.total = ad::add(nll, aux);
  return out;
}

/// One optimizer update on a prepared minibatch. A skipped batch leaves
/// parameters and optimizer state untouched.
inline LossValue train_step(FlowModel& model, OptimizerState& opt, const LossInputs& in, const TrainConfig& cfg) {
  model.zero_grad();
  LossValue loss = compute_loss(model, in, cfg);
  if (loss.skipped) return loss;
  ad::backward(loss.total);
  optimizer_step(opt, model.trainable_parameters(), cfg.learning_rate, cfg.weight_decay);
  return loss;
}

/// Trains `model` in place and returns per-epoch history. Outlier and margin
/// losses need `general` data and a frozen `general_model`; swapping the
/// roles of the two models trains the general model against inliers.
inline History train(FlowModel& model, const LabeledDataset& in_data, const LabeledDataset* general,
                     FlowModel* general_model, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.loss != LossKind::NllOnly && (general == nullptr || general_model == nullptr || general->size() == 0)) {
    throw ConfigError(to_string(cfg.loss) + " needs general-distribution data and a general model");
  }
  if (cfg.supervised && (!in_data.labeled() || !model.class_means())) {
    throw ConfigError("supervised training needs labeled data and a gaussian_mixture prior");
  }
  if (in_data.size() == 0) throw ConfigError("training set is empty");
  History history;
  history.seed = cfg.seed;
  if (cfg.epochs == 0) return history;

  std::mt19937_64 rng(cfg.seed);
  if (!model.initialized()) {
    std::vector<std::size_t> idx = all_indices(in_data);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(idx.size(), std::max<std::size_t>(cfg.init_batch, 2)));
    model.initialize(detail::training_batch(in_data, idx, cfg, rng));
  }
  OptimizerState opt;
  std::vector<std::size_t> order = all_indices(in_data);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double nll_sum = 0.0, aux_sum = 0.0;
    std::size_t batches = 0, skipped = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<std::size_t> idx(order.begin() + static_cast<long>(b),
                                   order.begin() + static_cast<long>(std::min(order.size(), b + cfg.batch_size)));
      LossInputs in;
      in.x = detail::training_batch(in_data, idx, cfg, rng);
      if (cfg.supervised)
        for (std::size_t i : idx) in.labels.push_back(in_data.labels[i]);
      if (cfg.loss != LossKind::NllOnly) {
        std::uniform_int_distribution<std::size_t> pick(0, general->size() - 1);
        std::vector<std::size_t> gidx(idx.size());
        for (auto& g : gidx) g = pick(rng);
        in.x_general = detail::training_batch(*general, gidx, cfg, rng);
        in.logp_general_model = general_model->log_prob(in.x_general);
        if (cfg.supervised && cfg.loss == LossKind::NllPlusOutlier) in.logp_general_on_x = general_model->log_prob(in.x);
      }
      LossValue loss = train_step(model, opt, in, cfg);
      if (loss.skipped) {
        ++skipped;
        continue;
      }
      nll_sum += loss.nll;
      aux_sum += loss.aux;
      ++batches;
    }
    const double denom = batches ? static_cast<double>(batches) : NAN;
    history.add(epoch, "train", "nll", nll_sum / denom);
    history.add(epoch, "train", "bpd", bits_per_dim(-nll_sum / denom, model.input_dim()));
    if (cfg.loss == LossKind::NllPlusOutlier) history.add(epoch, "train", "outlier_loss", aux_sum / denom);
    if (cfg.loss == LossKind::NllPlusMargin) history.add(epoch, "train", "margin_loss", aux_sum / denom);
    history.add(epoch, "train", "skipped_batches", static_cast<double>(skipped));
  }
  return history;
}

}  // namespace flowad
