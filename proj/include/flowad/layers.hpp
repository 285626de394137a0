#pragma once

// Invertible building blocks. Inputs are batched: [N, C, H, W] for the
// convolutional variants, [N, D] for the dense variant. Every forward pass
// returns the per-example log |det J| as an [N] vector.

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "flowad/autodiff.hpp"
#include "flowad/errors.hpp"
#include "flowad/linalg.hpp"
#include "flowad/tensor.hpp"

namespace flowad {

using ad::Parameter;
using ad::Var;

struct LayerOutput {
  Var y;
  Var log_det;  // [N], nats
};

namespace detail {

inline std::size_t batch_of(const Var& x) {
  if (x.value().rank() < 2) throw ShapeError("expected batched input, got " + shape_string(x.shape()));
  return x.shape()[0];
}

// Elements per example per channel (H*W for images, 1 for vectors).
inline std::size_t spatial_of(const Var& x) {
  const Shape& s = x.shape();
  std::size_t sp = 1;
  for (std::size_t i = 2; i < s.size(); ++i) sp *= s[i];
  return sp;
}

inline Var zeros_per_example(std::size_t n) { return Var(Tensor(Shape{n}, 0.0)); }

// Broadcasts a scalar Var to [N].
inline Var per_example(const Var& scalar, std::size_t n) { return ad::add(zeros_per_example(n), scalar); }

template <class Rng>
Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace detail

class FlowLayer {
 public:
  virtual ~FlowLayer() = default;
  virtual LayerOutput forward(const Var& x) = 0;
  virtual Var inverse(const Var& y) = 0;
  virtual std::vector<Parameter*> parameters() { return {}; }
  virtual std::string kind() const = 0;
};

/// Per-channel affine map y = s * x + b with s = exp(log_scale).
class ActNorm : public FlowLayer {
 public:
  /// `image_input`: parameters broadcast as [C,1,1] over [N,C,H,W];
  /// otherwise as [C] over [N,C].
  ActNorm(std::size_t channels, bool image_input)
      : channels_(channels),
        param_shape_(image_input ? Shape{channels, 1, 1} : Shape{channels}),
        log_scale_("actnorm.log_scale", Tensor(param_shape_, 0.0)),
        bias_("actnorm.bias", Tensor(param_shape_, 0.0)) {}

  std::string kind() const override { return "actnorm"; }
  std::size_t channels() const noexcept { return channels_; }
  bool initialized() const noexcept { return initialized_; }
  void mark_initialized() noexcept { initialized_ = true; }

  Tensor scale() const {
    Tensor s(Shape{channels_});
    for (std::size_t c = 0; c < channels_; ++c) s[c] = std::exp(log_scale_.value()[c]);
    return s;
  }

  /// Sets s and b directly; every s_c must be positive.
  void set_scale_bias(const std::vector<double>& s, const std::vector<double>& b) {
    if (s.size() != channels_ || b.size() != channels_) throw ShapeError("actnorm parameter size mismatch");
    Tensor ls(param_shape_), bt(param_shape_);
    for (std::size_t c = 0; c < channels_; ++c) {
      if (!(s[c] > 0.0)) throw DomainError("actnorm scale must be positive");
      ls[c] = std::log(s[c]);
      bt[c] = b[c];
    }
    log_scale_.set_value(std::move(ls));
    bias_.set_value(std::move(bt));
    initialized_ = true;
  }

  /// Data-dependent init: the batch maps to per-channel mean 0, variance 1.
  void init_from_batch(const Tensor& batch) {
    if (batch.rank() < 2 || batch.dim(1) != channels_) {
      throw ShapeError("actnorm init batch has shape " + shape_string(batch.shape()));
    }
    const std::size_t n = batch.dim(0);
    if (n < 2) throw ContractError("actnorm init needs at least 2 examples");
    const std::size_t sp = batch.size() / (n * channels_);
    std::vector<double> s(channels_), b(channels_);
    for (std::size_t c = 0; c < channels_; ++c) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < sp; ++j) mean += batch[(i * channels_ + c) * sp + j];
      mean /= static_cast<double>(n * sp);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < sp; ++j) {
          const double d = batch[(i * channels_ + c) * sp + j] - mean;
          var += d * d;
        }
      var /= static_cast<double>(n * sp);
      if (!(var > 1e-12)) {
        throw DegenerateInputError("actnorm init: channel " + std::to_string(c) + " is constant");
      }
      s[c] = 1.0 / std::sqrt(var);
      b[c] = -mean * s[c];
    }
    set_scale_bias(s, b);
  }

  LayerOutput forward(const Var& x) override {
    check(x);
    const std::size_t n = detail::batch_of(x);
    Var y = ad::add(ad::mul(x, ad::exp(log_scale_.var())), bias_.var());
    Var ld = ad::scale(ad::sum(log_scale_.var()), static_cast<double>(detail::spatial_of(x)));
    return {y, detail::per_example(ld, n)};
  }

  Var inverse(const Var& y) override {
    check(y);
    return ad::mul(ad::sub(y, bias_.var()), ad::exp(ad::neg(log_scale_.var())));
  }

  std::vector<Parameter*> parameters() override { return {&log_scale_, &bias_}; }

 private:
  void check(const Var& x) const {
    if (!initialized_) throw StateError("actnorm used before initialization");
    if (x.value().rank() < 2 || x.shape()[1] != channels_) {
      throw ShapeError("actnorm expects " + std::to_string(channels_) + " channels, got " +
                       shape_string(x.shape()));
    }
  }

  std::size_t channels_;
  Shape param_shape_;
  Parameter log_scale_;
  Parameter bias_;
  bool initialized_ = false;
};

/// Channel-mixing linear map: a 1x1 convolution on images, a square dense
/// projection on vectors.
class Invertible1x1 : public FlowLayer {
 public:
  template <class Rng>
  Invertible1x1(std::size_t channels, bool image_input, Rng& rng, bool trainable = true)
      : channels_(channels),
        image_input_(image_input),
        weight_("invconv.weight", linalg::random_orthogonal(channels, rng), trainable) {}

  std::string kind() const override { return "invconv"; }
  const Tensor& weight() const noexcept { return weight_.value(); }
  void set_weight(Tensor w) { weight_.set_value(std::move(w)); }
  bool trainable() const noexcept { return weight_.trainable(); }

  LayerOutput forward(const Var& x) override {
    check(x);
    Var ld = ad::scale(ad::log_abs_det(weight_.var()), static_cast<double>(detail::spatial_of(x)));
    return {apply(x, weight_.var()), detail::per_example(ld, detail::batch_of(x))};
  }

  Var inverse(const Var& y) override {
    check(y);
    return apply(y, ad::inverse(weight_.var()));
  }

  std::vector<Parameter*> parameters() override { return {&weight_}; }

 private:
  Var apply(const Var& x, const Var& w) const {
    if (image_input_) return ad::conv2d(x, ad::reshape(w, Shape{channels_, channels_, 1, 1}));
    return ad::matmul(x, ad::transpose(w));
  }

  void check(const Var& x) const {
    const std::size_t want_rank = image_input_ ? 4 : 2;
    if (x.value().rank() != want_rank || x.shape()[1] != channels_) {
      throw ShapeError("invconv expects " + std::to_string(channels_) + " channels, got " +
                       shape_string(x.shape()));
    }
  }

  std::size_t channels_;
  bool image_input_;
  Parameter weight_;
};

/// Maps the conditioning half to 2 * transformed channels (translation, raw scale).
class CouplingNet {
 public:
  virtual ~CouplingNet() = default;
  virtual Var operator()(const Var& x) = 0;
  virtual std::vector<Parameter*> parameters() = 0;
};

/// conv3x3 -> ReLU -> conv1x1 -> ReLU -> conv3x3 (zero-initialized).
class ConvCouplingNet : public CouplingNet {
 public:
  template <class Rng>
  ConvCouplingNet(std::size_t in_channels, std::size_t hidden, std::size_t out_channels, Rng& rng)
      : w1_("coupling.conv1.weight",
            detail::normal_tensor({hidden, in_channels, 3, 3}, 1.0 / std::sqrt(9.0 * in_channels), rng)),
        b1_("coupling.conv1.bias", Tensor({hidden, 1, 1}, 0.0)),
        w2_("coupling.conv2.weight",
            detail::normal_tensor({hidden, hidden, 1, 1}, 1.0 / std::sqrt(double(hidden)), rng)),
        b2_("coupling.conv2.bias", Tensor({hidden, 1, 1}, 0.0)),
        w3_("coupling.conv3.weight", Tensor({out_channels, hidden, 3, 3}, 0.0)),
        b3_("coupling.conv3.bias", Tensor({out_channels, 1, 1}, 0.0)) {}

  Var operator()(const Var& x) override {
    Var h = ad::relu(ad::add(ad::conv2d(x, w1_.var()), b1_.var()));
    h = ad::relu(ad::add(ad::conv2d(h, w2_.var()), b2_.var()));
    return ad::add(ad::conv2d(h, w3_.var()), b3_.var());
  }

  std::vector<Parameter*> parameters() override { return {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_}; }

 private:
  Parameter w1_, b1_, w2_, b2_, w3_, b3_;
};

/// linear -> ReLU -> linear -> ReLU -> linear (zero-initialized).
class DenseCouplingNet : public CouplingNet {
 public:
  template <class Rng>
  DenseCouplingNet(std::size_t in_dim, std::size_t hidden, std::size_t out_dim, Rng& rng)
      : w1_("coupling.fc1.weight", detail::normal_tensor({in_dim, hidden}, 1.0 / std::sqrt(double(in_dim)), rng)),
        b1_("coupling.fc1.bias", Tensor({hidden}, 0.0)),
        w2_("coupling.fc2.weight", detail::normal_tensor({hidden, hidden}, 1.0 / std::sqrt(double(hidden)), rng)),
        b2_("coupling.fc2.bias", Tensor({hidden}, 0.0)),
        w3_("coupling.fc3.weight", Tensor({hidden, out_dim}, 0.0)),
        b3_("coupling.fc3.bias", Tensor({out_dim}, 0.0)) {}

  Var operator()(const Var& x) override {
    Var h = ad::relu(ad::add(ad::matmul(x, w1_.var()), b1_.var()));
    h = ad::relu(ad::add(ad::matmul(h, w2_.var()), b2_.var()));
    return ad::add(ad::matmul(h, w3_.var()), b3_.var());
  }

  std::vector<Parameter*> parameters() override { return {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_}; }

 private:
  Parameter w1_, b1_, w2_, b2_, w3_, b3_;
};

/// The first ceil(C/2) channels condition; the rest are transformed as
/// y_b = (x_b + t) * s with s = sigmoid(raw + 2).
class AffineCoupling : public FlowLayer {
 public:
  static constexpr double kScaleShift = 2.0;

  AffineCoupling(std::size_t channels, std::unique_ptr<CouplingNet> net)
      : channels_(channels), cond_(channels - channels / 2), net_(std::move(net)) {
    if (channels < 2) throw ContractError("affine coupling needs at least 2 channels");
  }

  std::string kind() const override { return "coupling"; }
  std::size_t conditioning_channels() const noexcept { return cond_; }
  std::size_t transformed_channels() const noexcept { return channels_ - cond_; }

  LayerOutput forward(const Var& x) override {
    check(x);
    Var xa = ad::slice_channels(x, 0, cond_);
    Var xb = ad::slice_channels(x, cond_, channels_);
    auto [t, raw] = shift_and_raw(xa);
    Var pre = ad::add_scalar(raw, kScaleShift);
    Var yb = ad::mul(ad::add(xb, t), ad::sigmoid(pre));
    Var ld = ad::sum_per_example(ad::log_sigmoid(pre));
    return {ad::concat_channels(xa, yb), ld};
  }

  Var inverse(const Var& y) override {
    check(y);
    Var ya = ad::slice_channels(y, 0, cond_);
    Var yb = ad::slice_channels(y, cond_, channels_);
    auto [t, raw] = shift_and_raw(ya);
    Var xb = ad::sub(ad::div(yb, ad::sigmoid(ad::add_scalar(raw, kScaleShift))), t);
    return ad::concat_channels(ya, xb);
  }

  std::vector<Parameter*> parameters() override { return net_->parameters(); }

 private:
  std::pair<Var, Var> shift_and_raw(const Var& xa) {
    const std::size_t tb = channels_ - cond_;
    Var out = (*net_)(xa);
    if (out.value().rank() < 2 || out.shape()[1] != 2 * tb) {
      throw ShapeError("coupling net produced " + shape_string(out.shape()));
    }
    return {ad::slice_channels(out, 0, tb), ad::slice_channels(out, tb, 2 * tb)};
  }

  void check(const Var& x) const {
    if (x.value().rank() < 2 || x.shape()[1] != channels_) {
      throw ShapeError("coupling expects " + std::to_string(channels_) + " channels, got " +
                       shape_string(x.shape()));
    }
  }

  std::size_t channels_;
  std::size_t cond_;
  std::unique_ptr<CouplingNet> net_;
};

/// Space-to-depth by a factor of 2: [N,C,H,W] -> [N,4C,H/2,W/2].
class Squeeze : public FlowLayer {
 public:
  std::string kind() const override { return "squeeze"; }
  LayerOutput forward(const Var& x) override {
    return {ad::squeeze2d(x), detail::zeros_per_example(detail::batch_of(x))};
  }
  Var inverse(const Var& y) override { return ad::unsqueeze2d(y); }
};

/// Channel partition into the part passed on (h) and the part emitted (z).
struct Split {
  static std::pair<Var, Var> split(const Var& x) {
    const std::size_t c = x.shape().at(1);
    if (c % 2) throw ShapeError("split needs an even channel count, got " + std::to_string(c));
    return {ad::slice_channels(x, 0, c / 2), ad::slice_channels(x, c / 2, c)};
  }
  static Var merge(const Var& h, const Var& z) { return ad::concat_channels(h, z); }
};

/// Runs layers in order; the log-det is the sum of the layers' log-dets.
inline LayerOutput forward_sequence(const std::vector<FlowLayer*>& layers, const Var& x) {
  Var h = x;
  Var ld = detail::zeros_per_example(detail::batch_of(x));
  for (FlowLayer* l : layers) {
    auto out = l->forward(h);
    h = out.y;
    ld = ad::add(ld, out.log_det);
  }
  return {h, ld};
}

inline Var inverse_sequence(const std::vector<FlowLayer*>& layers, const Var& y) {
  Var h = y;
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) h = (*it)->inverse(h);
  return h;
}

}  // namespace flowad
