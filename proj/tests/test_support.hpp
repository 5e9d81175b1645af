#pragma once

// Test-only oracles. Nothing here calls into the reverse-mode code path.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "bhn/rng.hpp"
#include "bhn/tensor.hpp"

namespace bhn::testing {

/// Central finite differences of a scalar function.
inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-5) {
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// Relative error with a small floor so exact zeros compare sanely.
inline double rel_err(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_rel_err(const Tensor& a, const Tensor& b, double floor = 1e-3) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, rel_err(a[i], b[i], floor));
  return m;
}

/// Numerical Jacobian of a vector map R^D -> R^D, returned row-major [out][in].
inline std::vector<std::vector<double>> numeric_jacobian(
    const std::function<std::vector<double>(const std::vector<double>&)>& f, const std::vector<double>& x,
    double h = 1e-5) {
  const std::size_t d = x.size();
  std::vector<std::vector<double>> jac(d, std::vector<double>(d));
  auto probe = x;
  for (std::size_t j = 0; j < d; ++j) {
    probe[j] = x[j] + h;
    const auto up = f(probe);
    probe[j] = x[j] - h;
    const auto down = f(probe);
    probe[j] = x[j];
    for (std::size_t i = 0; i < up.size(); ++i) jac[i][j] = (up[i] - down[i]) / (2 * h);
  }
  return jac;
}

/// log|det| by Gaussian elimination with partial pivoting.
inline double log_abs_det(std::vector<std::vector<double>> m) {
  const std::size_t n = m.size();
  double acc = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(m[r][c]) > std::abs(m[piv][c])) piv = r;
    std::swap(m[piv], m[c]);
    if (m[c][c] == 0) return -INFINITY;
    acc += std::log(std::abs(m[c][c]));
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = m[r][c] / m[c][c];
      for (std::size_t k = c; k < n; ++k) m[r][k] -= f * m[c][k];
    }
  }
  return acc;
}

inline Tensor uniform(Rng& rng, Shape s, double lo = -2.0, double hi = 2.0) {
  return rng.uniform_tensor(std::move(s), lo, hi);
}

}  // namespace bhn::testing
