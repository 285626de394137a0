#pragma once

// Non-flow baselines: the local pixel-difference pseudo-likelihood and a
// lossless-compression code length standing in for a general image model.

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "flowad/data.hpp"
#include "flowad/errors.hpp"
#include "flowad/tensor.hpp"

namespace flowad {

/// Each pixel minus the mean of its 3x3 neighborhood (itself included),
/// per channel. At borders the neighborhood shrinks to the cells inside
/// the image. Accepts [H, W] or [C, H, W].
inline Tensor pixel_diff_features(const Tensor& image) {
  if (image.rank() != 2 && image.rank() != 3) throw ContractError("pixel_diff_features expects [H,W] or [C,H,W]");
  const std::size_t c = image.rank() == 3 ? image.dim(0) : 1;
  const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  if (h < 1 || w < 1) throw ContractError("image must be at least 1x1");
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const std::size_t base = ch * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t y0 = y ? y - 1 : 0, y1 = std::min(h - 1, y + 1);
        const std::size_t x0 = x ? x - 1 : 0, x1 = std::min(w - 1, x + 1);
        double s = 0.0;
        for (std::size_t yy = y0; yy <= y1; ++yy)
          for (std::size_t xx = x0; xx <= x1; ++xx) s += image[base + yy * w + xx];
        const double cnt = static_cast<double>((y1 - y0 + 1) * (x1 - x0 + 1));
        out[base + y * w + x] = image[base + y * w + x] - s / cnt;
      }
  }
  return out;
}

inline Tensor pixels_to_tensor(const LabeledDataset& ds, std::size_t i) {
  const auto& img = ds.images.at(i);
  Tensor t(Shape{ds.channels, ds.height, ds.width});
  for (std::size_t j = 0; j < img.size(); ++j) t[j] = img[j];
  return t;
}

/// 100-bin histogram of pixel differences with add-one smoothing.
class PixelDiffHistogram {
 public:
  static constexpr std::size_t kBins = 100;

  /// Fit range is [min, max] of the corpus differences, frozen afterwards.
  static PixelDiffHistogram fit(const std::vector<Tensor>& corpus) {
    if (corpus.empty()) throw ContractError("histogram needs a nonempty corpus");
    std::vector<Tensor> feats;
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& img : corpus) {
      feats.push_back(pixel_diff_features(img));
      for (double v : feats.back().data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    if (!(hi > lo)) {
      lo -= 0.5;
      hi += 0.5;
    }
    PixelDiffHistogram hist(lo, hi);
    std::vector<double> counts(kBins, 0.0);
    double total = 0.0;
    for (const auto& f : feats)
      for (double v : f.data()) {
        counts[hist.bin(v)] += 1.0;
        total += 1.0;
      }
    for (std::size_t b = 0; b < kBins; ++b) hist.probs_[b] = (counts[b] + 1.0) / (total + kBins);
    return hist;
  }

  static PixelDiffHistogram fit(const LabeledDataset& ds) {
    std::vector<Tensor> corpus;
    for (std::size_t i = 0; i < ds.size(); ++i) corpus.push_back(pixels_to_tensor(ds, i));
    return fit(corpus);
  }

  /// Out-of-range values fall in the nearest edge bin.
  std::size_t bin(double v) const {
    const double f = (v - lo_) / (hi_ - lo_) * static_cast<double>(kBins);
    if (!(f > 0.0)) return 0;
    return std::min(kBins - 1, static_cast<std::size_t>(f));
  }

  double lo() const noexcept { return lo_; }
  double hi() const noexcept { return hi_; }
  std::span<const double> probabilities() const noexcept { return probs_; }

  /// Sum over pixels of ln p(bin of the pixel's difference).
  double pseudo_loglik(const Tensor& image) const {
    Tensor f = pixel_diff_features(image);
    double s = 0.0;
    for (double v : f.data()) s += std::log(probs_[bin(v)]);
    return s;
  }

 private:
  PixelDiffHistogram(double lo, double hi) : lo_(lo), hi_(hi), probs_(kBins, 0.0) {}

  double lo_;
  double hi_;
  std::vector<double> probs_;
};

/// Length in bits of the raw-deflate encoding (level 9, no container) of
/// the pixel bytes.
inline double compressed_size_bits(std::span<const std::uint8_t> pixels) {
  z_stream zs{};
  if (deflateInit2(&zs, 9, Z_DEFLATED, -15, 9, Z_DEFAULT_STRATEGY) != Z_OK) {
    throw Error("deflateInit2 failed");
  }
  std::vector<unsigned char> out(deflateBound(&zs, static_cast<uLong>(pixels.size())) + 16);
  zs.next_in = const_cast<Bytef*>(pixels.data());
  zs.avail_in = static_cast<uInt>(pixels.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  const auto produced = zs.total_out;
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw Error("deflate did not finish");
  return 8.0 * static_cast<double>(produced);
}

}  // namespace flowad
