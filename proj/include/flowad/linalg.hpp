#pragma once

// Small dense linear algebra for square matrices stored in Tensors.
// Naive O(n^3) loops; matrices here are at most a few hundred wide.

#include <cmath>
#include <random>
#include <vector>

#include "flowad/errors.hpp"
#include "flowad/tensor.hpp"

namespace flowad::linalg {

inline constexpr double kMinAbsDet = 1e-12;

inline std::size_t square_size(const Tensor& m) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) {
    throw ShapeError("expected square matrix, got " + shape_string(m.shape()));
  }
  return m.dim(0);
}

/// LU factorization with partial pivoting: P*A = L*U packed in `lu`.
struct LU {
  std::size_t n = 0;
  std::vector<double> lu;
  std::vector<std::size_t> perm;
  int sign = 1;
  bool singular = false;

  explicit LU(const Tensor& a) : n(square_size(a)), lu(a.values()), perm(n) {
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t k = 0; k < n; ++k) {
      std::size_t piv = k;
      double best = std::abs(lu[k * n + k]);
      for (std::size_t i = k + 1; i < n; ++i) {
        double v = std::abs(lu[i * n + k]);
        if (v > best) {
          best = v;
          piv = i;
        }
      }
      if (best == 0.0) {
        singular = true;
        continue;
      }
      if (piv != k) {
        for (std::size_t j = 0; j < n; ++j) std::swap(lu[k * n + j], lu[piv * n + j]);
        std::swap(perm[k], perm[piv]);
        sign = -sign;
      }
      const double d = lu[k * n + k];
      for (std::size_t i = k + 1; i < n; ++i) {
        double f = lu[i * n + k] / d;
        lu[i * n + k] = f;
        if (f == 0.0) continue;
        for (std::size_t j = k + 1; j < n; ++j) lu[i * n + j] -= f * lu[k * n + j];
      }
    }
  }

  double log_abs_det() const {
    if (singular) return -INFINITY;
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::log(std::abs(lu[i * n + i]));
    return s;
  }

  // Solves A x = b in place.
  void solve(std::span<double> b) const {
    std::vector<double> x(n);
    for (std::size_t i = 0; i < n; ++i) x[i] = b[perm[i]];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < i; ++j) x[i] -= lu[i * n + j] * x[j];
    }
    for (std::size_t ii = n; ii-- > 0;) {
      for (std::size_t j = ii + 1; j < n; ++j) x[ii] -= lu[ii * n + j] * x[j];
      x[ii] /= lu[ii * n + ii];
    }
    for (std::size_t i = 0; i < n; ++i) b[i] = x[i];
  }
};

/// ln|det A|; throws SingularityError when |det A| <= 1e-12.
inline double log_abs_det_checked(const Tensor& a) {
  LU f(a);
  double ld = f.log_abs_det();
  if (f.singular || !(ld > std::log(kMinAbsDet))) {
    throw SingularityError("matrix is singular (ln|det| = " + std::to_string(ld) + ")");
  }
  return ld;
}

inline Tensor inverse(const Tensor& a) {
  LU f(a);
  if (f.singular || !(f.log_abs_det() > std::log(kMinAbsDet))) {
    throw SingularityError("cannot invert singular matrix");
  }
  const std::size_t n = f.n;
  Tensor inv(Shape{n, n});
  std::vector<double> col(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::fill(col.begin(), col.end(), 0.0);
    col[j] = 1.0;
    f.solve(col);
    for (std::size_t i = 0; i < n; ++i) inv[i * n + j] = col[i];
  }
  return inv;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects a matrix");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor t(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = a[i * c + j];
  return t;
}

/// Haar-random orthogonal matrix via Gram-Schmidt on a Gaussian draw.
template <class Rng>
Tensor random_orthogonal(std::size_t n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    std::vector<double> q(n * n);
    for (double& v : q) v = normal(rng);
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) {
      double* row = &q[i * n];
      for (std::size_t k = 0; k < i; ++k) {
        const double* prev = &q[k * n];
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += row[j] * prev[j];
        for (std::size_t j = 0; j < n; ++j) row[j] -= dot * prev[j];
      }
      double norm = 0.0;
      for (std::size_t j = 0; j < n; ++j) norm += row[j] * row[j];
      norm = std::sqrt(norm);
      if (norm < 1e-8) {
        ok = false;
        break;
      }
      for (std::size_t j = 0; j < n; ++j) row[j] /= norm;
    }
    if (ok) return Tensor(Shape{n, n}, std::move(q));
  }
}

}  // namespace flowad::linalg
