#pragma once

// Multi-scale Glow-style flow. Each scale is
//   squeeze -> K x (actnorm, invertible 1x1, affine coupling) -> split
// and the final scale emits everything that is left. z_1..z_S are scored
// independently under the prior, so log p(x) decomposes into per-scale
// contributions c_i = log p_z(z_i) + sum of scale i's log-dets.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "flowad/autodiff.hpp"
#include "flowad/errors.hpp"
#include "flowad/layers.hpp"
#include "flowad/tensor.hpp"

namespace flowad {

enum class Variant { Conv, LocalPatch, Dense };
enum class PriorKind { StandardNormal, GaussianMixture };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::Conv: return "conv";
    case Variant::LocalPatch: return "local_patch";
    case Variant::Dense: return "dense";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "conv") return Variant::Conv;
  if (s == "local_patch") return Variant::LocalPatch;
  if (s == "dense") return Variant::Dense;
  throw ConfigError("unknown model variant '" + s + "'");
}

inline std::string to_string(PriorKind p) {
  return p == PriorKind::StandardNormal ? "standard_normal" : "gaussian_mixture";
}

inline PriorKind parse_prior(const std::string& s) {
  if (s == "standard_normal") return PriorKind::StandardNormal;
  if (s == "gaussian_mixture") return PriorKind::GaussianMixture;
  throw ConfigError("unknown prior '" + s + "'");
}

struct ModelConfig {
  Variant variant = Variant::Conv;
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t scales = 2;
  std::size_t steps = 4;  // actnorm-1x1-coupling sequences per scale
  std::size_t hidden = 32;  // conv coupling width
  // Dense coupling width as a fraction of the scale's flattened size
  // (512 / 3072 for the 32x32 rgb reference architecture).
  double dense_hidden_ratio = 512.0 / 3072.0;
  std::size_t dense_min_hidden = 8;
  std::size_t patch_size = 8;
  PriorKind prior = PriorKind::StandardNormal;
  std::size_t classes = 1;
  std::uint64_t seed = 0;

  std::size_t input_dim() const { return channels * height * width; }

  /// Representation shape right after each scale's squeeze (per patch for
  /// the local-patch variant).
  std::vector<Shape> scale_shapes() const {
    std::vector<Shape> out;
    std::size_t c = channels, h = height, w = width;
    if (variant == Variant::LocalPatch) {
      out.push_back({4 * c, patch_size / 2, patch_size / 2});
      return out;
    }
    for (std::size_t s = 0; s < scales; ++s) {
      c *= 4;
      h /= 2;
      w /= 2;
      out.push_back({c, h, w});
      c /= 2;
    }
    return out;
  }

  std::size_t num_patches() const {
    return variant == Variant::LocalPatch ? (height / patch_size) * (width / patch_size) : 1;
  }

  /// Flattened size of each z_i per example.
  std::vector<std::size_t> latent_dims() const {
    auto shapes = scale_shapes();
    std::vector<std::size_t> dims;
    for (std::size_t s = 0; s < shapes.size(); ++s) {
      const std::size_t n = shape_numel(shapes[s]);
      dims.push_back(s + 1 == shapes.size() ? n * num_patches() : n / 2);
    }
    return dims;
  }

  /// Hidden width of the dense coupling nets for a scale of flattened size `flat`.
  std::size_t dense_hidden(std::size_t flat) const {
    const auto h = static_cast<std::size_t>(std::llround(dense_hidden_ratio * static_cast<double>(flat)));
    return std::max(dense_min_hidden, h);
  }

  /// Key-value echo, one `key = value` per line; read back by parse().
  std::string serialize() const {
    std::ostringstream os;
    os.precision(17);
    os << "variant = " << to_string(variant) << '\n'
       << "channels = " << channels << '\n'
       << "height = " << height << '\n'
       << "width = " << width << '\n'
       << "scales = " << scales << '\n'
       << "steps = " << steps << '\n'
       << "hidden = " << hidden << '\n'
       << "dense_hidden_ratio = " << dense_hidden_ratio << '\n'
       << "dense_min_hidden = " << dense_min_hidden << '\n'
       << "patch_size = " << patch_size << '\n'
       << "prior = " << to_string(prior) << '\n'
       << "classes = " << classes << '\n'
       << "seed = " << seed << '\n';
    return os.str();
  }

  /// Applies one key; unknown keys raise ConfigError.
  void set(const std::string& key, const std::string& value) {
    auto as_size = [&]() -> std::size_t {
      try {
        std::size_t pos = 0;
        long long v = std::stoll(value, &pos);
        if (pos != value.size() || v < 0) throw std::invalid_argument(value);
        return static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        throw ConfigError("model." + key + ": expected a non-negative integer, got '" + value + "'");
      }
    };
    if (key == "variant") variant = parse_variant(value);
    else if (key == "channels") channels = as_size();
    else if (key == "height") height = as_size();
    else if (key == "width") width = as_size();
    else if (key == "scales") scales = as_size();
    else if (key == "steps") steps = as_size();
    else if (key == "hidden") hidden = as_size();
    else if (key == "dense_hidden_ratio") {
      try {
        dense_hidden_ratio = std::stod(value);
      } catch (const std::exception&) {
        throw ConfigError("model.dense_hidden_ratio: not a number: '" + value + "'");
      }
    } else if (key == "dense_min_hidden") dense_min_hidden = as_size();
    else if (key == "patch_size") patch_size = as_size();
    else if (key == "prior") prior = parse_prior(value);
    else if (key == "classes") classes = as_size();
    else if (key == "seed") seed = as_size();
    else throw ConfigError("unknown model key '" + key + "'");
  }

  static ModelConfig parse(const std::string& text) {
    ModelConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      auto eq = line.find('=');
      if (eq == std::string::npos || line.rfind('#', 0) == 0) continue;
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
  }

  void validate() const {
    if (channels == 0 || height == 0 || width == 0) throw ConfigError("input shape must be positive");
    if (steps == 0) throw ConfigError("steps per scale must be >= 1");
    if (prior == PriorKind::GaussianMixture && classes == 0) throw ConfigError("mixture prior needs classes >= 1");
    if (variant == Variant::LocalPatch) {
      if (scales != 1) throw ConfigError("local_patch variant is single-scale (scales = 1)");
      if (patch_size == 0 || patch_size % 2) throw ConfigError("patch_size must be even and positive");
      if (height % patch_size || width % patch_size) {
        throw ConfigError("image " + std::to_string(height) + "x" + std::to_string(width) +
                          " is not divisible into " + std::to_string(patch_size) + "-pixel patches");
      }
      return;
    }
    if (scales == 0) throw ConfigError("scales must be >= 1");
    const std::size_t f = std::size_t{1} << scales;
    if (height % f || width % f) {
      throw ConfigError("input " + std::to_string(height) + "x" + std::to_string(width) +
                        " cannot be squeezed " + std::to_string(scales) + " times");
    }
    if (variant == Variant::Conv && hidden == 0) throw ConfigError("hidden width must be >= 1");
  }
};

/// Per-example latent parts and per-scale contributions (no graph).
struct LatentCode {
  std::vector<Tensor> parts;          // z_i, flattened [N, D_i]
  std::vector<Tensor> contributions;  // c_i, [N]
  Tensor log_prob;                    // [N]

  std::size_t batch() const { return log_prob.size(); }
};

/// Graph-carrying encoding used for training and latent optimization.
struct Encoding {
  std::vector<Var> parts;
  std::vector<Var> prior_terms;  // log p_z(z_i), [N]
  std::vector<Var> log_dets;     // scale i's summed log-dets, [N]
  std::vector<Var> contributions;
  Var log_prob;  // sum of all prior terms plus sum of all log-dets
};

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// Standard-normal log density of each row: [N, D] -> [N].
inline Var standard_normal_logpdf(const Var& z) {
  const double d = static_cast<double>(z.size() / std::max<std::size_t>(z.shape()[0], 1));
  return ad::add_scalar(ad::scale(ad::sum_per_example(ad::square(z)), -0.5), -0.5 * d * kLog2Pi);
}

class FlowModel {
 public:
  explicit FlowModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const auto shapes = scale_shapes();
    for (std::size_t s = 0; s < shapes.size(); ++s) {
      Scale sc;
      const Shape& sh = shapes[s];
      const bool dense = cfg_.variant == Variant::Dense;
      const std::size_t width = dense ? shape_numel(sh) : sh[0];
      for (std::size_t k = 0; k < cfg_.steps; ++k) {
        sc.actnorms.push_back(std::make_unique<ActNorm>(width, !dense));
        // Dense projections stay at their random initialization.
        sc.invconvs.push_back(std::make_unique<Invertible1x1>(width, !dense, rng, !dense));
        const std::size_t cond = width - width / 2;
        const std::size_t out = 2 * (width / 2);
        std::unique_ptr<CouplingNet> net;
        if (dense) {
          net = std::make_unique<DenseCouplingNet>(cond, dense_hidden(width), out, rng);
        } else {
          net = std::make_unique<ConvCouplingNet>(cond, cfg_.hidden, out, rng);
        }
        sc.couplings.push_back(std::make_unique<AffineCoupling>(width, std::move(net)));
      }
      scales_.push_back(std::move(sc));
    }
    const auto dims = latent_dims();
    std::normal_distribution<double> normal(0.0, 1.0);
    if (cfg_.prior == PriorKind::GaussianMixture) {
      Tensor means(Shape{cfg_.classes, dims.back()});
      for (double& v : means.data()) v = normal(rng);
      class_means_ = Parameter("prior.class_means", std::move(means));
    }
  }

  FlowModel(const FlowModel&) = delete;
  FlowModel& operator=(const FlowModel&) = delete;

  const ModelConfig& config() const noexcept { return cfg_; }
  std::size_t num_scales() const noexcept { return scales_.size(); }
  Shape input_shape() const { return {cfg_.channels, cfg_.height, cfg_.width}; }
  std::size_t input_dim() const { return cfg_.input_dim(); }

  std::vector<Shape> scale_shapes() const { return cfg_.scale_shapes(); }
  std::size_t num_patches() const { return cfg_.num_patches(); }
  std::vector<std::size_t> latent_dims() const { return cfg_.latent_dims(); }
  std::size_t dense_hidden(std::size_t width) const { return cfg_.dense_hidden(width); }

  /// Every parameter in declaration order (frozen ones included).
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& sc : scales_) {
      for (std::size_t k = 0; k < sc.actnorms.size(); ++k) {
        for (auto* p : sc.actnorms[k]->parameters()) out.push_back(p);
        for (auto* p : sc.invconvs[k]->parameters()) out.push_back(p);
        for (auto* p : sc.couplings[k]->parameters()) out.push_back(p);
      }
    }
    if (class_means_) out.push_back(&*class_means_);
    return out;
  }

  std::vector<Parameter*> trainable_parameters() {
    std::vector<Parameter*> out;
    for (auto* p : parameters())
      if (p->trainable()) out.push_back(p);
    return out;
  }

  std::size_t num_trainable() {
    std::size_t n = 0;
    for (auto* p : trainable_parameters()) n += p->value().size();
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  std::vector<ActNorm*> actnorms() {
    std::vector<ActNorm*> out;
    for (auto& sc : scales_)
      for (auto& a : sc.actnorms) out.push_back(a.get());
    return out;
  }
  std::vector<Invertible1x1*> invconvs() {
    std::vector<Invertible1x1*> out;
    for (auto& sc : scales_)
      for (auto& a : sc.invconvs) out.push_back(a.get());
    return out;
  }
  std::vector<AffineCoupling*> couplings() {
    std::vector<AffineCoupling*> out;
    for (auto& sc : scales_)
      for (auto& a : sc.couplings) out.push_back(a.get());
    return out;
  }
  std::optional<Parameter>& class_means() { return class_means_; }

  bool initialized() {
    for (auto* a : actnorms())
      if (!a->initialized()) return false;
    return true;
  }
  void mark_initialized() {
    for (auto* a : actnorms()) a->mark_initialized();
  }

  /// Data-dependent actnorm initialization from a preprocessed batch.
  void initialize(const Tensor& batch) {
    ad::NoGradGuard guard;
    run_encode(Var(batch), /*init_actnorm=*/true);
  }

  /// Exact identity map: actnorm s=1 b=0, 1x1 = I, coupling scale 1 and
  /// shift 0 (to double precision), mixture means 0.
  void make_identity() {
    for (auto* a : actnorms()) {
      a->set_scale_bias(std::vector<double>(a->channels(), 1.0), std::vector<double>(a->channels(), 0.0));
    }
    for (auto* inv : invconvs()) {
      const std::size_t n = inv->weight().dim(0);
      Tensor eye(Shape{n, n}, 0.0);
      for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
      inv->set_weight(std::move(eye));
    }
    for (auto* c : couplings()) {
      auto params = c->parameters();
      // Final layer weight and bias are the last two parameters.
      Parameter* w = params[params.size() - 2];
      Parameter* b = params.back();
      w->set_value(Tensor(w->value().shape(), 0.0));
      Tensor bias(b->value().shape(), 0.0);
      const std::size_t tb = c->transformed_channels();
      // sigmoid(38 + 2) == 1 in double precision
      for (std::size_t i = tb; i < 2 * tb; ++i) bias[i] = 38.0;
      b->set_value(std::move(bias));
    }
    if (class_means_) class_means_->set_value(Tensor(class_means_->value().shape(), 0.0));
  }

  /// Differentiable encoding of a preprocessed batch [N, C, H, W].
  Encoding encode_var(const Var& x) { return run_encode(x, false); }

  LatentCode encode(const Tensor& x) {
    ad::NoGradGuard guard;
    Encoding e = run_encode(Var(x), false);
    LatentCode code;
    for (auto& z : e.parts) code.parts.push_back(z.value());
    for (auto& c : e.contributions) code.contributions.push_back(c.value());
    code.log_prob = e.log_prob.value();
    return code;
  }

  /// log p(x) per example, [N].
  Tensor log_prob(const Tensor& x) { return encode(x).log_prob; }

  /// log p(x | class k) for every class, [N, K]. Standard-normal priors
  /// report a single column.
  Var class_log_likelihoods(const Encoding& e) {
    if (!class_means_) return ad::reshape(e.log_prob, Shape{e.log_prob.size(), 1});
    const Var& zl = e.parts.back();
    const std::size_t n = zl.shape()[0];
    Var rest = e.log_dets.back();
    for (std::size_t i = 0; i + 1 < e.parts.size(); ++i) rest = ad::add(rest, e.contributions[i]);
    std::vector<Var> cols;
    Var out;
    for (std::size_t k = 0; k < cfg_.classes; ++k) {
      Var mu = ad::gather_rows(class_means_->var(), {k});  // [1, D]
      Var lp = ad::add(standard_normal_logpdf(ad::sub(zl, mu)), rest);
      Var col = ad::reshape(lp, Shape{n, 1});
      out = k == 0 ? col : ad::concat_channels(out, col);
    }
    return out;
  }

  Var decode_var(const std::vector<Var>& parts) {
    const auto dims = latent_dims();
    if (parts.size() != dims.size()) {
      throw ShapeError("decode expects " + std::to_string(dims.size()) + " latent parts, got " +
                       std::to_string(parts.size()));
    }
    const std::size_t n = parts[0].shape().at(0);
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (parts[i].value().rank() != 2 || parts[i].shape()[0] != n || parts[i].shape()[1] != dims[i]) {
        throw ShapeError("latent part " + std::to_string(i + 1) + " has shape " +
                         shape_string(parts[i].shape()) + ", expected [N," + std::to_string(dims[i]) + "]");
      }
    }
    const auto shapes = scale_shapes();
    if (cfg_.variant == Variant::LocalPatch) {
      const std::size_t p = num_patches();
      const Shape& sh = shapes[0];
      Var y = ad::reshape(parts[0], Shape{n * p, sh[0], sh[1], sh[2]});
      Var h = ad::unsqueeze2d(inverse_scale(0, y));
      return unpatchify(h, n);
    }
    Var h;
    for (std::size_t s = shapes.size(); s-- > 0;) {
      const Shape& sh = shapes[s];
      const bool last = s + 1 == shapes.size();
      Var y;
      if (cfg_.variant == Variant::Dense) {
        y = last ? parts[s] : ad::concat_channels(ad::reshape(h, Shape{n, shape_numel(sh) / 2}), parts[s]);
      } else {
        y = last ? ad::reshape(parts[s], Shape{n, sh[0], sh[1], sh[2]})
                 : Split::merge(h, ad::reshape(parts[s], Shape{n, sh[0] / 2, sh[1], sh[2]}));
      }
      Var u = inverse_scale(s, y);
      if (cfg_.variant == Variant::Dense) u = ad::reshape(u, Shape{n, sh[0], sh[1], sh[2]});
      h = ad::unsqueeze2d(u);
    }
    return h;
  }

  Tensor decode(const LatentCode& code) {
    ad::NoGradGuard guard;
    std::vector<Var> parts;
    for (const auto& z : code.parts) parts.emplace_back(z);
    return decode_var(parts).value();
  }

  /// Splices latents: scales listed (1-based) come from xB, the rest from xA.
  Tensor mix_latents(const Tensor& xa, const Tensor& xb, const std::set<std::size_t>& take_from_b) {
    if (xa.shape() != xb.shape()) throw ShapeError("mix_latents: image shapes differ");
    for (std::size_t s : take_from_b) {
      if (s < 1 || s > num_scales()) throw ContractError("mix_latents: scale index " + std::to_string(s) + " out of range");
    }
    LatentCode a = encode(xa);
    LatentCode b = encode(xb);
    for (std::size_t s : take_from_b) a.parts[s - 1] = b.parts[s - 1];
    return decode(a);
  }

  struct LatentAscent {
    Tensor image;                            // [N, C, H, W]
    std::vector<std::vector<double>> trace;  // per example: log p before step 1, then after each step
  };

  /// Gradient ascent on log p(x) over z_1..z_{S-1} with z_S held fixed.
  /// Each step halves its step size (up to 20 times) until log p does not
  /// decrease; if none of the trials qualifies the step is skipped.
  LatentAscent optimize_early_latents(const Tensor& x, std::size_t steps, double step_size) {
    if (steps < 1) throw ContractError("optimize_early_latents needs steps >= 1");
    if (num_scales() < 2) throw ContractError("optimize_early_latents needs a multi-scale model");
    const std::size_t n = x.dim(0);
    const std::size_t per = x.size() / n;
    LatentAscent result{Tensor(x.shape()), {}};
    for (std::size_t i = 0; i < n; ++i) {
      Shape one = x.shape();
      one[0] = 1;
      Tensor xi(one, std::vector<double>(x.values().begin() + i * per, x.values().begin() + (i + 1) * per));
      LatentCode code = encode(xi);
      std::vector<Tensor> z(code.parts.begin(), code.parts.end());
      const std::size_t free = z.size() - 1;

      auto evaluate = [&](const std::vector<Tensor>& zs, std::vector<Tensor>* grads) {
        std::vector<Var> vars;
        for (std::size_t s = 0; s < zs.size(); ++s) vars.emplace_back(zs[s], grads != nullptr && s < free);
        if (!grads) {
          ad::NoGradGuard guard;
          return encode_var(decode_var(vars)).log_prob.item();
        }
        Var lp = encode_var(decode_var(vars)).log_prob;
        Var total = ad::sum(lp);
        ad::backward(total);
        grads->clear();
        for (std::size_t s = 0; s < free; ++s) grads->push_back(vars[s].grad());
        return total.item();
      };

      std::vector<double> trace;
      std::vector<Tensor> grads;
      double current = evaluate(z, nullptr);
      trace.push_back(current);
      for (std::size_t step = 0; step < steps; ++step) {
        evaluate(z, &grads);
        for (const auto& g : grads) {
          if (!g.all_finite()) throw NumericsError("non-finite latent gradient");
        }
        double eta = step_size;
        for (int attempt = 0; attempt <= 20; ++attempt, eta *= 0.5) {
          std::vector<Tensor> trial = z;
          for (std::size_t s = 0; s < free; ++s)
            for (std::size_t j = 0; j < trial[s].size(); ++j) trial[s][j] += eta * grads[s][j];
          const double lp = evaluate(trial, nullptr);
          if (std::isfinite(lp) && lp >= current) {
            z = std::move(trial);
            current = lp;
            break;
          }
        }
        trace.push_back(current);
      }
      std::vector<Var> vars;
      for (auto& t : z) vars.emplace_back(t);
      Tensor img;
      {
        ad::NoGradGuard guard;
        img = decode_var(vars).value();
      }
      std::copy(img.values().begin(), img.values().end(), result.image.data().begin() + i * per);
      result.trace.push_back(std::move(trace));
    }
    return result;
  }

 private:
  struct Scale {
    std::vector<std::unique_ptr<ActNorm>> actnorms;
    std::vector<std::unique_ptr<Invertible1x1>> invconvs;
    std::vector<std::unique_ptr<AffineCoupling>> couplings;
  };

  LayerOutput forward_scale(std::size_t s, const Var& x, bool init_actnorm) {
    Scale& sc = scales_[s];
    Var h = x;
    Var ld = detail::zeros_per_example(detail::batch_of(x));
    for (std::size_t k = 0; k < sc.actnorms.size(); ++k) {
      if (init_actnorm && !sc.actnorms[k]->initialized()) sc.actnorms[k]->init_from_batch(h.value());
      for (FlowLayer* layer : {static_cast<FlowLayer*>(sc.actnorms[k].get()),
                               static_cast<FlowLayer*>(sc.invconvs[k].get()),
                               static_cast<FlowLayer*>(sc.couplings[k].get())}) {
        auto out = layer->forward(h);
        h = out.y;
        ld = ad::add(ld, out.log_det);
      }
    }
    return {h, ld};
  }

  Var inverse_scale(std::size_t s, const Var& y) {
    Scale& sc = scales_[s];
    Var h = y;
    for (std::size_t k = sc.actnorms.size(); k-- > 0;) {
      h = sc.couplings[k]->inverse(h);
      h = sc.invconvs[k]->inverse(h);
      h = sc.actnorms[k]->inverse(h);
    }
    return h;
  }

  Var prior_logpdf(const Var& z, bool last) {
    if (!last || !class_means_) return standard_normal_logpdf(z);
    // Uniform mixture over class modes on the final latent.
    const std::size_t n = z.shape()[0];
    Var cols;
    for (std::size_t k = 0; k < cfg_.classes; ++k) {
      Var mu = ad::gather_rows(class_means_->var(), {k});
      Var col = ad::reshape(standard_normal_logpdf(ad::sub(z, mu)), Shape{n, 1});
      cols = k == 0 ? col : ad::concat_channels(cols, col);
    }
    return ad::add_scalar(ad::logsumexp_rows(cols), -std::log(static_cast<double>(cfg_.classes)));
  }

  std::shared_ptr<std::vector<std::size_t>> patch_index(std::size_t n) const {
    const std::size_t c = cfg_.channels, H = cfg_.height, W = cfg_.width, p = cfg_.patch_size;
    const std::size_t py = H / p, px = W / p;
    auto idx = std::make_shared<std::vector<std::size_t>>();
    idx->reserve(n * c * H * W);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ty = 0; ty < py; ++ty)
        for (std::size_t tx = 0; tx < px; ++tx)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < p; ++y)
              for (std::size_t x = 0; x < p; ++x)
                idx->push_back(((b * c + ch) * H + ty * p + y) * W + tx * p + x);
    return idx;
  }

  Var patchify(const Var& x) const {
    const std::size_t n = x.shape()[0];
    const std::size_t p = cfg_.patch_size;
    return ad::gather_flat(x, Shape{n * num_patches(), cfg_.channels, p, p}, patch_index(n));
  }

  Var unpatchify(const Var& patches, std::size_t n) const {
    auto fwd = patch_index(n);
    auto inv = std::make_shared<std::vector<std::size_t>>(fwd->size());
    for (std::size_t i = 0; i < fwd->size(); ++i) (*inv)[(*fwd)[i]] = i;
    return ad::gather_flat(patches, Shape{n, cfg_.channels, cfg_.height, cfg_.width}, std::move(inv));
  }

  void check_input(const Var& x) const {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != cfg_.channels || s[2] != cfg_.height || s[3] != cfg_.width) {
      throw ShapeError("model expects [N," + std::to_string(cfg_.channels) + "," +
                       std::to_string(cfg_.height) + "," + std::to_string(cfg_.width) + "], got " +
                       shape_string(s));
    }
  }

  Encoding run_encode(const Var& x, bool init_actnorm) {
    check_input(x);
    const std::size_t n = x.shape()[0];
    Encoding e;
    if (cfg_.variant == Variant::LocalPatch) {
      const std::size_t p = num_patches();
      Var h = ad::squeeze2d(patchify(x));
      auto out = forward_scale(0, h, init_actnorm);
      Var z = ad::reshape(out.y, Shape{n * p, out.y.size() / (n * p)});
      Var patch_prior = standard_normal_logpdf(z);
      Var z_img = ad::reshape(z, Shape{n, z.size() / n});
      // Patches are independent: image terms are sums over its patches.
      Var prior = class_means_ ? prior_logpdf(z_img, true)
                               : ad::sum_per_example(ad::reshape(patch_prior, Shape{n, p}));
      Var ld = ad::sum_per_example(ad::reshape(out.log_det, Shape{n, p}));
      e.parts.push_back(z_img);
      e.prior_terms.push_back(prior);
      e.log_dets.push_back(ld);
      e.contributions.push_back(ad::add(prior, ld));
      e.log_prob = ad::add(prior, ld);
      return e;
    }
    Var h = x;
    const auto shapes = scale_shapes();
    for (std::size_t s = 0; s < shapes.size(); ++s) {
      const bool last = s + 1 == shapes.size();
      h = ad::squeeze2d(h);
      const Shape sq = h.shape();
      if (cfg_.variant == Variant::Dense) h = ad::reshape(h, Shape{n, h.size() / n});
      auto out = forward_scale(s, h, init_actnorm);
      Var z;
      if (last) {
        z = out.y;
      } else {
        auto [keep, emit] = Split::split(out.y);
        z = emit;
        h = cfg_.variant == Variant::Dense ? ad::reshape(keep, Shape{n, sq[1] / 2, sq[2], sq[3]}) : keep;
      }
      z = ad::reshape(z, Shape{n, z.size() / n});
      Var prior = prior_logpdf(z, last);
      e.parts.push_back(z);
      e.prior_terms.push_back(prior);
      e.log_dets.push_back(out.log_det);
      e.contributions.push_back(ad::add(prior, out.log_det));
    }
    Var prior_sum = e.prior_terms[0];
    Var ld_sum = e.log_dets[0];
    for (std::size_t s = 1; s < e.parts.size(); ++s) {
      prior_sum = ad::add(prior_sum, e.prior_terms[s]);
      ld_sum = ad::add(ld_sum, e.log_dets[s]);
    }
    e.log_prob = ad::add(prior_sum, ld_sum);
    return e;
  }

  ModelConfig cfg_;
  std::vector<Scale> scales_;
  std::optional<Parameter> class_means_;
};

/// Builds a model after validating that the configuration is consistent.
inline std::unique_ptr<FlowModel> build_variant(const ModelConfig& cfg) {
  return std::make_unique<FlowModel>(cfg);
}

}  // namespace flowad
