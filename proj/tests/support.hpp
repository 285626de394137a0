#pragma once

// Independent oracles shared by the unit and acceptance suites. Nothing here
// goes through the reverse-mode graph except where an analytic value is being
// checked against a finite-difference one.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "flowad/autodiff.hpp"
#include "flowad/layers.hpp"
#include "flowad/linalg.hpp"
#include "flowad/model.hpp"
#include "flowad/tensor.hpp"
#include "flowad/training.hpp"

namespace flowad::testing {

template <class Rng>
Tensor random_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> d(0.0, stddev);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = d(rng);
  return t;
}

inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n}, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      out[i * n + j] = s;
    }
  return out;
}

/// Direct same-padded cross-correlation of x [C,H,W] with w [O,C,kh,kw].
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  Tensor out(Shape{O, H, W}, 0.0);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < KH; ++ky)
            for (std::size_t kx = 0; kx < KW; ++kx) {
              const long iy = static_cast<long>(y + ky) - static_cast<long>(KH / 2);
              const long ix = static_cast<long>(xx + kx) - static_cast<long>(KW / 2);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
              s += x[(c * H + iy) * W + ix] * w[((o * C + c) * KH + ky) * KW + kx];
            }
        out[(o * H + y) * W + xx] = s;
      }
  return out;
}

/// Central finite-difference gradient of a scalar function of a tensor.
inline Tensor fd_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// |analytic - numeric| / max(1, |analytic|).
inline double gradient_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

/// ln|det J| of a map R^D -> R^D with J from central differences.
inline double fd_log_abs_det(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  const std::size_t d = x.size();
  Tensor jac(Shape{d, d});
  Tensor probe = x;
  for (std::size_t j = 0; j < d; ++j) {
    const double orig = probe[j];
    probe[j] = orig + h;
    Tensor fp = f(probe);
    probe[j] = orig - h;
    Tensor fm = f(probe);
    probe[j] = orig;
    if (fp.size() != d) throw ShapeError("fd_log_abs_det: map is not square");
    for (std::size_t i = 0; i < d; ++i) jac[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
  }
  return linalg::LU(jac).log_abs_det();
}

/// Rank-free AUROC: fraction of (inlier, outlier) pairs won, ties 1/2.
inline double pairwise_auroc(const std::vector<double>& in, const std::vector<double>& out) {
  double wins = 0.0;
  for (double a : in)
    for (double b : out) wins += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
  return wins / (static_cast<double>(in.size()) * static_cast<double>(out.size()));
}

/// Moves every parameter away from its structured initialization while
/// keeping the map well conditioned: actnorm log-scales and biases, 1x1
/// weights (orthogonal plus noise) and all coupling weights.
template <class Rng>
void randomize_model(FlowModel& model, Rng& rng, double stddev = 0.1) {
  std::normal_distribution<double> d(0.0, stddev);
  for (auto* a : model.actnorms()) {
    std::vector<double> s(a->channels()), b(a->channels());
    for (std::size_t c = 0; c < s.size(); ++c) {
      s[c] = std::exp(2.0 * d(rng));
      b[c] = d(rng);
    }
    a->set_scale_bias(s, b);
  }
  for (auto* inv : model.invconvs()) {
    Tensor w = linalg::random_orthogonal(inv->weight().dim(0), rng);
    for (double& v : w.data()) v += d(rng);
    inv->set_weight(std::move(w));
  }
  for (auto* c : model.couplings()) {
    for (auto* p : c->parameters()) {
      Tensor v = p->value();
      for (double& x : v.data()) x += d(rng);
      p->set_value(std::move(v));
    }
  }
  if (model.class_means()) {
    Tensor v = model.class_means()->value();
    for (double& x : v.data()) x += d(rng);
    model.class_means()->set_value(std::move(v));
  }
}

/// Largest relative error between the analytic gradient of the training
/// objective and central differences, over every trainable scalar.
inline double loss_gradient_max_error(FlowModel& model, const LossInputs& in, const TrainConfig& cfg,
                                      double h = 1e-5) {
  model.zero_grad();
  LossValue loss = compute_loss(model, in, cfg);
  if (loss.skipped) throw ContractError("loss_gradient_max_error: batch was skipped");
  ad::backward(loss.total);
  double worst = 0.0;
  for (Parameter* p : model.trainable_parameters()) {
    const Tensor analytic = p->grad();
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      const double orig = p->value()[i];
      p->mutable_value()[i] = orig + h;
      const double fp = compute_loss(model, in, cfg).total.item();
      p->mutable_value()[i] = orig - h;
      const double fm = compute_loss(model, in, cfg).total.item();
      p->mutable_value()[i] = orig;
      worst = std::max(worst, gradient_rel_error(analytic[i], (fp - fm) / (2.0 * h)));
    }
  }
  model.zero_grad();
  return worst;
}

/// Dense micro-model on 1x4x4 inputs with 160 trainable scalars.
inline ModelConfig micro_config(PriorKind prior = PriorKind::StandardNormal, std::size_t classes = 1) {
  ModelConfig cfg;
  cfg.variant = Variant::Dense;
  cfg.channels = 1;
  cfg.height = 4;
  cfg.width = 4;
  cfg.scales = 2;
  cfg.steps = 1;
  cfg.dense_hidden_ratio = 0.0;
  cfg.dense_min_hidden = 2;
  cfg.prior = prior;
  cfg.classes = classes;
  cfg.seed = 3;
  return cfg;
}

}  // namespace flowad::testing
