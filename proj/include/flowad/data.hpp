#pragma once

// Datasets of 8-bit images, IDX ingestion, preprocessing into the flow's
// input range, patch tiling and synthetic smooth/textured generators.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "flowad/errors.hpp"
#include "flowad/tensor.hpp"

namespace flowad {

enum class SplitTag { Train, Test };

inline std::string to_string(SplitTag s) { return s == SplitTag::Train ? "train" : "test"; }

inline SplitTag parse_split(const std::string& s) {
  if (s == "train") return SplitTag::Train;
  if (s == "test") return SplitTag::Test;
  throw ConfigError("unknown split '" + s + "' (expected train or test)");
}

/// Images stored as integer pixels, channel-major (C x H x W) per image.
struct LabeledDataset {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::vector<std::uint8_t>> images;
  std::vector<int> labels;  // empty when unlabeled
  std::vector<std::size_t> ids;
  SplitTag split = SplitTag::Train;

  std::size_t size() const noexcept { return images.size(); }
  std::size_t pixels_per_image() const noexcept { return channels * height * width; }
  bool labeled() const noexcept { return !labels.empty(); }

  void push_back(std::vector<std::uint8_t> img, std::optional<int> label = std::nullopt) {
    if (img.size() != pixels_per_image()) throw ShapeError("image size does not match dataset shape");
    ids.push_back(ids.empty() ? 0 : ids.back() + 1);
    images.push_back(std::move(img));
    if (label) labels.push_back(*label);
  }

  LabeledDataset subset(const std::vector<std::size_t>& idx) const {
    LabeledDataset out;
    out.channels = channels;
    out.height = height;
    out.width = width;
    out.split = split;
    for (std::size_t i : idx) {
      out.images.push_back(images.at(i));
      out.ids.push_back(ids.at(i));
      if (labeled()) out.labels.push_back(labels.at(i));
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Preprocessing

/// Dequantization cell width for 8-bit data.
inline constexpr double kPixelBin = 1.0 / 256.0;

enum class Noise { None, Dequantize, HalfBin };

/// pixel/256 - 0.5, in [-0.5, 0.5 - 1/256].
inline double preprocess_pixel(int pixel) {
  if (pixel < 0 || pixel > 255) throw DomainError("pixel value " + std::to_string(pixel) + " outside 0..255");
  return static_cast<double>(pixel) * kPixelBin - 0.5;
}

/// Evaluation input: the center of the pixel's dequantization cell.
inline double noise_free_eval(int pixel) { return preprocess_pixel(pixel) + 0.5 * kPixelBin; }

inline Tensor noise_free_eval(const std::vector<int>& pixels) {
  Tensor t(Shape{pixels.size()});
  for (std::size_t i = 0; i < pixels.size(); ++i) t[i] = noise_free_eval(pixels[i]);
  return t;
}

/// Back to pixels: floor((x + 0.5) * 256), clamped to 0..255. Inverts all
/// three noise modes.
inline std::uint8_t to_pixel(double x) {
  const double p = std::floor((x + 0.5) * 256.0);
  return static_cast<std::uint8_t>(std::clamp(p, 0.0, 255.0));
}

/// Batch [N, C, H, W] from the listed images.
template <class Rng>
Tensor preprocess_batch(const LabeledDataset& ds, const std::vector<std::size_t>& idx, Noise noise, Rng& rng) {
  const std::size_t per = ds.pixels_per_image();
  Tensor out(Shape{idx.size(), ds.channels, ds.height, ds.width});
  std::uniform_real_distribution<double> u(0.0, kPixelBin);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& img = ds.images.at(idx[b]);
    for (std::size_t j = 0; j < per; ++j) {
      double v = preprocess_pixel(img[j]);
      if (noise == Noise::Dequantize) v += u(rng);
      else if (noise == Noise::HalfBin) v += 0.5 * kPixelBin;
      out[b * per + j] = v;
    }
  }
  return out;
}

inline Tensor preprocess_batch(const LabeledDataset& ds, const std::vector<std::size_t>& idx, Noise noise) {
  if (noise == Noise::Dequantize) throw ContractError("dequantization needs an RNG");
  std::mt19937_64 unused(0);
  return preprocess_batch(ds, idx, noise, unused);
}

inline std::vector<std::size_t> all_indices(const LabeledDataset& ds) {
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

// ---------------------------------------------------------------------------
// Color

inline double to_grayscale(double r, double g, double b) { return r * 0.2989 + g * 0.5870 + b * 0.1140; }

inline LabeledDataset grayscale(const LabeledDataset& ds) {
  if (ds.channels == 1) return ds;
  if (ds.channels != 3) throw ContractError("grayscale conversion needs 3-channel images");
  LabeledDataset out = ds;
  out.channels = 1;
  const std::size_t hw = ds.height * ds.width;
  for (auto& img : out.images) {
    std::vector<std::uint8_t> g(hw);
    for (std::size_t i = 0; i < hw; ++i) {
      const double v = to_grayscale(img[i], img[hw + i], img[2 * hw + i]);
      g[i] = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
    }
    img = std::move(g);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Patches

/// Row-major tiling of a [C, H, W] image into [C, size, size] patches.
inline std::vector<Tensor> extract_patches(const Tensor& image, std::size_t size) {
  if (image.rank() != 3) throw ShapeError("extract_patches expects [C,H,W]");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (size == 0 || h % size || w % size) {
    throw ContractError("image " + std::to_string(h) + "x" + std::to_string(w) +
                        " not divisible into patches of " + std::to_string(size));
  }
  std::vector<Tensor> out;
  for (std::size_t ty = 0; ty < h / size; ++ty)
    for (std::size_t tx = 0; tx < w / size; ++tx) {
      Tensor p(Shape{c, size, size});
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < size; ++y)
          for (std::size_t x = 0; x < size; ++x)
            p[(ch * size + y) * size + x] = image[(ch * h + ty * size + y) * w + tx * size + x];
      out.push_back(std::move(p));
    }
  return out;
}

inline Tensor reassemble_patches(const std::vector<Tensor>& patches, std::size_t height, std::size_t width) {
  if (patches.empty()) throw ContractError("no patches to reassemble");
  const std::size_t c = patches[0].dim(0), size = patches[0].dim(1);
  if (height % size || width % size || patches.size() != (height / size) * (width / size)) {
    throw ContractError("patch count does not tile the requested image");
  }
  Tensor img(Shape{c, height, width});
  std::size_t k = 0;
  for (std::size_t ty = 0; ty < height / size; ++ty)
    for (std::size_t tx = 0; tx < width / size; ++tx, ++k)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < size; ++y)
          for (std::size_t x = 0; x < size; ++x)
            img[(ch * height + ty * size + y) * width + tx * size + x] = patches[k][(ch * size + y) * size + x];
  return img;
}

// ---------------------------------------------------------------------------
// IDX files (big-endian header: magic, then one u32 per dimension)

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::uint32_t read_be32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("IDX header truncated");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

inline void write_be32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  os.write(b, 4);
}

}  // namespace detail

inline LabeledDataset read_idx_images(std::istream& is) {
  const std::uint32_t magic = detail::read_be32(is);
  if (magic != kIdxImagesMagic) throw FormatError("bad IDX image magic");
  const std::uint32_t n = detail::read_be32(is);
  const std::uint32_t h = detail::read_be32(is);
  const std::uint32_t w = detail::read_be32(is);
  LabeledDataset ds;
  ds.channels = 1;
  ds.height = h;
  ds.width = w;
  const std::size_t per = static_cast<std::size_t>(h) * w;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::vector<std::uint8_t> img(per);
    if (!is.read(reinterpret_cast<char*>(img.data()), static_cast<std::streamsize>(per))) {
      throw FormatError("IDX image file truncated at image " + std::to_string(i));
    }
    ds.push_back(std::move(img));
  }
  return ds;
}

inline std::vector<int> read_idx_labels(std::istream& is) {
  if (detail::read_be32(is) != kIdxLabelsMagic) throw FormatError("bad IDX label magic");
  const std::uint32_t n = detail::read_be32(is);
  std::vector<int> labels(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    char c;
    if (!is.get(c)) throw FormatError("IDX label file truncated");
    labels[i] = static_cast<unsigned char>(c);
  }
  return labels;
}

/// Reads an IDX image file and, when given, its label file.
inline LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path = {}) {
  std::ifstream is(images_path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + images_path);
  LabeledDataset ds = read_idx_images(is);
  if (!labels_path.empty()) {
    std::ifstream ls(labels_path, std::ios::binary);
    if (!ls) throw FormatError("cannot open " + labels_path);
    auto labels = read_idx_labels(ls);
    if (labels.size() != ds.size()) {
      throw FormatError("label count " + std::to_string(labels.size()) + " != image count " +
                        std::to_string(ds.size()));
    }
    ds.labels = std::move(labels);
  }
  return ds;
}

inline void write_idx_images(std::ostream& os, const LabeledDataset& ds) {
  if (ds.channels != 1) throw ContractError("IDX image files hold single-channel images");
  detail::write_be32(os, kIdxImagesMagic);
  detail::write_be32(os, static_cast<std::uint32_t>(ds.size()));
  detail::write_be32(os, static_cast<std::uint32_t>(ds.height));
  detail::write_be32(os, static_cast<std::uint32_t>(ds.width));
  for (const auto& img : ds.images) os.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
}

inline void write_idx_labels(std::ostream& os, const std::vector<int>& labels) {
  detail::write_be32(os, kIdxLabelsMagic);
  detail::write_be32(os, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) os.put(static_cast<char>(l));
}

// ---------------------------------------------------------------------------
// Synthetic domains

enum class Domain { Smooth, Textured };

inline Domain parse_domain(const std::string& s) {
  if (s == "smooth") return Domain::Smooth;
  if (s == "textured") return Domain::Textured;
  throw ConfigError("unknown synthetic domain '" + s + "'");
}

struct SyntheticOptions {
  std::size_t blur_passes = 1;  // applications of the 5x5 binomial kernel
  double gain = 175.0;          // pixel = 127.5 + gain * field
};

/// smooth: iid N(0,1) field blurred by a normalized 5x5 binomial kernel
/// (`blur_passes` times), mapped affinely to 0..255 and clamped.
/// textured: iid uniform integers in 0..255.
inline LabeledDataset gen_synthetic(Domain domain, std::size_t n, std::size_t channels, std::size_t height,
                                    std::size_t width, std::uint64_t seed, SyntheticOptions opt = {}) {
  if (n < 1) throw ContractError("gen_synthetic needs n >= 1");
  LabeledDataset ds;
  ds.channels = channels;
  ds.height = height;
  ds.width = width;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> uniform(0, 255);
  static constexpr std::array<double, 5> kBinomial{1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  const std::size_t pad = 2 * opt.blur_passes;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::uint8_t> img(channels * height * width);
    if (domain == Domain::Textured) {
      for (auto& p : img) p = static_cast<std::uint8_t>(uniform(rng));
    } else {
      for (std::size_t c = 0; c < channels; ++c) {
        // Generate with a margin so every output pixel sees a full kernel.
        std::size_t fh = height + 2 * pad, fw = width + 2 * pad;
        std::vector<double> field(fh * fw);
        for (double& v : field) v = normal(rng);
        for (std::size_t pass = 0; pass < opt.blur_passes; ++pass) {
          std::vector<double> tmp((fh) * (fw - 4));
          for (std::size_t y = 0; y < fh; ++y)
            for (std::size_t x = 0; x + 4 < fw; ++x) {
              double s = 0.0;
              for (std::size_t k = 0; k < 5; ++k) s += kBinomial[k] * field[y * fw + x + k];
              tmp[y * (fw - 4) + x] = s;
            }
          std::vector<double> out((fh - 4) * (fw - 4));
          for (std::size_t y = 0; y + 4 < fh; ++y)
            for (std::size_t x = 0; x < fw - 4; ++x) {
              double s = 0.0;
              for (std::size_t k = 0; k < 5; ++k) s += kBinomial[k] * tmp[(y + k) * (fw - 4) + x];
              out[y * (fw - 4) + x] = s;
            }
          field = std::move(out);
          fh -= 4;
          fw -= 4;
        }
        for (std::size_t j = 0; j < height * width; ++j) {
          const double v = 127.5 + opt.gain * field[j];
          img[c * height * width + j] = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
        }
      }
    }
    ds.push_back(std::move(img));
  }
  return ds;
}

inline LabeledDataset concat_datasets(const LabeledDataset& a, const LabeledDataset& b) {
  if (a.channels != b.channels || a.height != b.height || a.width != b.width) {
    throw ShapeError("cannot concatenate datasets of different image shapes");
  }
  LabeledDataset out = a;
  const bool labeled = a.labeled() && b.labeled();
  if (!labeled) out.labels.clear();
  for (std::size_t i = 0; i < b.size(); ++i) {
    out.push_back(b.images[i], labeled ? std::optional<int>(b.labels[i]) : std::nullopt);
  }
  return out;
}

}  // namespace flowad
