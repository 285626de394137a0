#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "flowad/baselines.hpp"
#include "flowad/data.hpp"
#include "flowad/eval.hpp"
#include "support.hpp"

namespace flowad {
namespace {

// Direct 3x3 loop with an explicit in-bounds count.
double direct_diff(const Tensor& img, long y, long x) {
  const long h = static_cast<long>(img.dim(0)), w = static_cast<long>(img.dim(1));
  double s = 0;
  int cnt = 0;
  for (long dy = -1; dy <= 1; ++dy)
    for (long dx = -1; dx <= 1; ++dx) {
      const long yy = y + dy, xx = x + dx;
      if (yy < 0 || xx < 0 || yy >= h || xx >= w) continue;
      s += img[yy * w + xx];
      ++cnt;
    }
  return img[y * w + x] - s / cnt;
}

TEST(PixelDiff, ConstantImageIsZero) {
  Tensor f = pixel_diff_features(Tensor(Shape{5, 7}, 42.0));
  for (double v : f.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(PixelDiff, SingleBrightPixel) {
  Tensor img(Shape{5, 5}, 0.0);
  img[2 * 5 + 2] = 9.0;
  Tensor f = pixel_diff_features(img);
  EXPECT_NEAR(f[2 * 5 + 2], 8.0, 1e-12);
  EXPECT_NEAR(f[1 * 5 + 1], -1.0, 1e-12);
}

TEST(PixelDiff, CheckerboardMatchesDirectLoop) {
  Tensor img(Shape{6, 6});
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 0; x < 6; ++x) img[y * 6 + x] = (x + y) % 2 ? -1.0 : 1.0;
  Tensor f = pixel_diff_features(img);
  EXPECT_NEAR(f[2 * 6 + 2], 1.0 - 1.0 / 9.0, 1e-12);
  EXPECT_NEAR(f[2 * 6 + 3], -1.0 + 1.0 / 9.0, 1e-12);
  for (long y = 0; y < 6; ++y)
    for (long x = 0; x < 6; ++x) EXPECT_NEAR(f[y * 6 + x], direct_diff(img, y, x), 1e-12);
}

TEST(PixelDiff, PerChannelAndErrors) {
  std::mt19937_64 rng(1);
  Tensor img = testing::random_tensor({2, 4, 5}, rng);
  Tensor f = pixel_diff_features(img);
  Tensor ch1(Shape{4, 5}, std::vector<double>(img.values().begin() + 20, img.values().end()));
  for (long y = 0; y < 4; ++y)
    for (long x = 0; x < 5; ++x) EXPECT_NEAR(f[20 + y * 5 + x], direct_diff(ch1, y, x), 1e-12);
  EXPECT_THROW(pixel_diff_features(Tensor(Shape{0, 3})), ContractError);
  EXPECT_THROW(pixel_diff_features(Tensor(Shape{4})), ContractError);
}

TEST(Histogram, NormalizedAndPositive) {
  auto ds = gen_synthetic(Domain::Smooth, 20, 1, 8, 8, 3);
  auto hist = PixelDiffHistogram::fit(ds);
  auto p = hist.probabilities();
  ASSERT_EQ(p.size(), 100u);
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
  for (double v : p) EXPECT_GT(v, 0.0);
  EXPECT_EQ(hist.bin(hist.lo() - 100), 0u);
  EXPECT_EQ(hist.bin(hist.hi() + 100), 99u);
  EXPECT_EQ(hist.bin(hist.hi()), 99u);
}

TEST(Histogram, ConstantCorpus) {
  std::vector<Tensor> corpus(3, Tensor(Shape{4, 4}, 7.0));
  auto hist = PixelDiffHistogram::fit(corpus);
  const double pmax = *std::max_element(hist.probabilities().begin(), hist.probabilities().end());
  EXPECT_NEAR(pmax, 49.0 / 148.0, 1e-15);
  EXPECT_NEAR(hist.pseudo_loglik(Tensor(Shape{4, 4}, 3.0)), 16.0 * std::log(pmax), 1e-9);
}

TEST(Histogram, DeterministicAndPermutationInvariant) {
  auto ds = gen_synthetic(Domain::Smooth, 10, 1, 8, 8, 4);
  auto hist = PixelDiffHistogram::fit(ds);
  Tensor img = pixels_to_tensor(ds, 0);
  EXPECT_EQ(hist.pseudo_loglik(img), hist.pseudo_loglik(img));
  // Sum of per-pixel terms in any order gives the same total.
  Tensor f = pixel_diff_features(img);
  std::vector<double> terms;
  for (double v : f.data()) terms.push_back(std::log(hist.probabilities()[hist.bin(v)]));
  std::reverse(terms.begin(), terms.end());
  EXPECT_NEAR(std::accumulate(terms.begin(), terms.end(), 0.0), hist.pseudo_loglik(img), 1e-9);
}

TEST(Histogram, RanksSmoothAboveNoise) {
  auto smooth = gen_synthetic(Domain::Smooth, 100, 1, 16, 16, 5);
  auto noise = gen_synthetic(Domain::Textured, 100, 1, 16, 16, 6);
  auto hist = PixelDiffHistogram::fit(concat_datasets(smooth, noise));
  std::vector<double> a, b;
  for (std::size_t i = 0; i < 100; ++i) {
    a.push_back(hist.pseudo_loglik(pixels_to_tensor(smooth, i)));
    b.push_back(hist.pseudo_loglik(pixels_to_tensor(noise, i)));
  }
  EXPECT_GT(auroc(a, b), 0.9);
}

TEST(Compressed, ConstantSmallerThanNoise) {
  std::vector<std::uint8_t> flat(256, 90), noise(256);
  std::mt19937_64 rng(7);
  for (auto& v : noise) v = static_cast<std::uint8_t>(rng());
  EXPECT_LT(compressed_size_bits(flat), compressed_size_bits(noise));
  EXPECT_EQ(compressed_size_bits(noise), compressed_size_bits(noise));
}

TEST(Compressed, LargerAreaNotSmaller) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto small = gen_synthetic(Domain::Textured, 1, 1, 16, 16, seed);
    auto big = gen_synthetic(Domain::Textured, 1, 1, 32, 16, seed);
    EXPECT_GE(compressed_size_bits(big.images[0]), compressed_size_bits(small.images[0]));
    auto s2 = gen_synthetic(Domain::Smooth, 1, 1, 16, 16, seed);
    auto b2 = gen_synthetic(Domain::Smooth, 1, 1, 32, 16, seed);
    EXPECT_GE(compressed_size_bits(b2.images[0]), compressed_size_bits(s2.images[0]));
  }
}

TEST(Preprocess, AffineAndInvertible) {
  EXPECT_EQ(preprocess_pixel(0), -0.5);
  EXPECT_EQ(preprocess_pixel(255), 0.5 - 1.0 / 256);
  EXPECT_THROW(preprocess_pixel(300), DomainError);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, kPixelBin);
  for (int p = 0; p < 256; ++p) {
    EXPECT_EQ(to_pixel(preprocess_pixel(p)), p);
    EXPECT_EQ(std::lround((preprocess_pixel(p) + 0.5) * 256), p);
    EXPECT_EQ(to_pixel(noise_free_eval(p)), p);
    EXPECT_EQ(to_pixel(preprocess_pixel(p) + u(rng)), p);
  }
  EXPECT_EQ(to_pixel(3.0), 255);
  EXPECT_EQ(to_pixel(-3.0), 0);
}

TEST(Preprocess, BatchModes) {
  auto ds = gen_synthetic(Domain::Smooth, 3, 1, 4, 4, 9);
  Tensor plain = preprocess_batch(ds, all_indices(ds), Noise::None);
  Tensor half = preprocess_batch(ds, all_indices(ds), Noise::HalfBin);
  EXPECT_EQ(plain.shape(), (Shape{3, 1, 4, 4}));
  for (std::size_t i = 0; i < plain.size(); ++i) EXPECT_EQ(half[i] - plain[i], 0.5 * kPixelBin);
  std::mt19937_64 r1(1), r2(1);
  EXPECT_EQ(preprocess_batch(ds, {0, 2}, Noise::Dequantize, r1), preprocess_batch(ds, {0, 2}, Noise::Dequantize, r2));
  EXPECT_THROW(preprocess_batch(ds, {0}, Noise::Dequantize), ContractError);
}

TEST(Grayscale, Coefficients) {
  EXPECT_NEAR(to_grayscale(1, 0, 0), 0.2989, 1e-15);
  EXPECT_NEAR(to_grayscale(0, 0, 1), 0.1140, 1e-15);
  for (double v : {1.0, 17.0, 255.0}) EXPECT_LE(std::abs(to_grayscale(v, v, v) - v), 1e-4 * v * (1 + 1e-9));
  LabeledDataset rgb;
  rgb.channels = 3;
  rgb.height = rgb.width = 1;
  rgb.push_back({200, 100, 50});
  auto g = grayscale(rgb);
  EXPECT_EQ(g.channels, 1u);
  EXPECT_EQ(g.images[0][0], static_cast<std::uint8_t>(std::lround(to_grayscale(200, 100, 50))));
}

TEST(Patches, TilingAndReassembly) {
  std::mt19937_64 rng(10);
  Tensor img = testing::random_tensor({1, 32, 32}, rng);
  auto p = extract_patches(img, 8);
  EXPECT_EQ(p.size(), 16u);
  EXPECT_EQ(p[1][0], img[8]);  // second patch starts at column 8 of row 0
  EXPECT_EQ(reassemble_patches(p, 32, 32), img);
  EXPECT_EQ(extract_patches(testing::random_tensor({3, 16, 16}, rng), 8).size(), 4u);
  EXPECT_THROW(extract_patches(img, 7), ContractError);
}

TEST(Idx, HeaderRoundTripAndErrors) {
  LabeledDataset ds;
  ds.height = ds.width = 28;
  for (int i = 0; i < 2; ++i) {
    std::vector<std::uint8_t> img(784);
    for (std::size_t j = 0; j < img.size(); ++j) img[j] = static_cast<std::uint8_t>(j * (i + 3));
    ds.push_back(std::move(img));
  }
  std::stringstream ss;
  write_idx_images(ss, ds);
  const std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 4), std::string("\x00\x00\x08\x03", 4));
  EXPECT_EQ(bytes.size(), 16u + 2 * 784);
  auto back = read_idx_images(ss);
  EXPECT_EQ(back.size(), 2u);
  EXPECT_EQ(back.height, 28u);
  EXPECT_EQ(back.images, ds.images);
  std::stringstream rewritten;
  write_idx_images(rewritten, back);
  EXPECT_EQ(rewritten.str(), bytes);

  std::stringstream bad(std::string("\x00\x00\x08\x01", 4) + bytes.substr(4));
  EXPECT_THROW(read_idx_images(bad), FormatError);
  std::stringstream trunc(bytes.substr(0, bytes.size() - 10));
  EXPECT_THROW(read_idx_images(trunc), FormatError);
}

TEST(Idx, LabelCountMismatch) {
  const std::string dir = ::testing::TempDir();
  LabeledDataset ds;
  ds.height = ds.width = 2;
  ds.push_back({1, 2, 3, 4});
  ds.push_back({5, 6, 7, 8});
  {
    std::ofstream img(dir + "/imgs.idx", std::ios::binary);
    write_idx_images(img, ds);
    std::ofstream lab(dir + "/labs.idx", std::ios::binary);
    write_idx_labels(lab, {3});
    std::ofstream good(dir + "/labs2.idx", std::ios::binary);
    write_idx_labels(good, {3, 9});
  }
  EXPECT_THROW(load_idx(dir + "/imgs.idx", dir + "/labs.idx"), FormatError);
  auto loaded = load_idx(dir + "/imgs.idx", dir + "/labs2.idx");
  EXPECT_EQ(loaded.labels, (std::vector<int>{3, 9}));
  EXPECT_THROW(load_idx(dir + "/missing.idx"), FormatError);
}

TEST(Synthetic, SeededAndInRange) {
  auto a = gen_synthetic(Domain::Smooth, 5, 2, 8, 8, 11);
  auto b = gen_synthetic(Domain::Smooth, 5, 2, 8, 8, 11);
  EXPECT_EQ(a.images, b.images);
  EXPECT_NE(a.images, gen_synthetic(Domain::Smooth, 5, 2, 8, 8, 12).images);
  EXPECT_THROW(gen_synthetic(Domain::Smooth, 0, 1, 4, 4, 1), ContractError);
}

TEST(Synthetic, SmoothHasSmallerLocalDifferences) {
  auto smooth = gen_synthetic(Domain::Smooth, 100, 1, 8, 8, 13);
  auto tex = gen_synthetic(Domain::Textured, 100, 1, 8, 8, 14);
  auto mad = [](const LabeledDataset& ds) {
    double s = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const Tensor f = pixel_diff_features(pixels_to_tensor(ds, i));
      for (double v : f.data()) s += std::abs(v);
    }
    return s;
  };
  EXPECT_LT(mad(smooth), mad(tex));
}

TEST(Dataset, SubsetKeepsIdsAndSplit) {
  auto ds = gen_synthetic(Domain::Textured, 6, 1, 2, 2, 15);
  ds.split = SplitTag::Test;
  auto sub = ds.subset({4, 1});
  EXPECT_EQ(sub.ids, (std::vector<std::size_t>{4, 1}));
  EXPECT_EQ(sub.split, SplitTag::Test);
  EXPECT_EQ(parse_split("train"), SplitTag::Train);
  EXPECT_THROW(parse_split("val"), ConfigError);
}

}  // namespace
}  // namespace flowad
