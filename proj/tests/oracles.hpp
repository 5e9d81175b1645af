#pragma once

// Closed-form references shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <set>
#include <vector>

namespace bhn::testing {

/// Posterior and evidence for y_i ~ N(g, sigma^2), g ~ N(0, lambda).
struct GaussianMeanPosterior {
  double mean = 0;
  double var = 0;
  double log_evidence = 0;
};

inline GaussianMeanPosterior gaussian_mean_posterior(const std::vector<double>& y, double sigma, double lambda) {
  const double n = static_cast<double>(y.size());
  const double s2 = sigma * sigma;
  double sy = 0, syy = 0;
  for (double v : y) {
    sy += v;
    syy += v * v;
  }
  GaussianMeanPosterior p;
  const double prec = 1.0 / lambda + n / s2;
  p.var = 1.0 / prec;
  p.mean = p.var * sy / s2;
  // y ~ N(0, s2 I + lambda 11^T): determinant and inverse by Sherman-Morrison.
  const double logdet = n * std::log(s2) + std::log1p(n * lambda / s2);
  const double quad = (syy - lambda * sy * sy / (s2 + n * lambda)) / s2;
  p.log_evidence = -0.5 * (n * std::log(2 * std::numbers::pi) + logdet + quad);
  return p;
}

/// Exhaustive pairwise comparison: (2 * wins + ties) / (2 * P * N).
inline double brute_auc_roc(const std::vector<double>& s, const std::vector<int>& l) {
  std::uint64_t twice = 0, p = 0, n = 0;
  for (std::size_t i = 0; i < s.size(); ++i) (l[i] ? p : n) += 1;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] && !l[j]) twice += s[i] > s[j] ? 2 : (s[i] == s[j] ? 1 : 0);
  return static_cast<double>(twice) / (2.0 * static_cast<double>(p) * static_cast<double>(n));
}

/// Average precision by enumerating every distinct threshold t and
/// counting the items with score >= t from scratch.
inline double threshold_auc_pr(const std::vector<double>& s, const std::vector<int>& l) {
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  std::size_t pos = 0;
  for (int v : l) pos += v != 0;
  double ap = 0;
  std::size_t prev_tp = 0;
  for (double t : thresholds) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) (l[i] ? tp : fp) += 1;
    if (tp > prev_tp)
      ap += static_cast<double>(tp - prev_tp) / static_cast<double>(pos) *
            (static_cast<double>(tp) / static_cast<double>(tp + fp));
    prev_tp = tp;
  }
  return ap;
}

/// Rows of an S x C array rescaled to sum to one.
inline std::vector<std::vector<double>> rows_normalized(const std::vector<std::vector<double>>& p) {
  auto q = p;
  for (auto& row : q) {
    double z = 0;
    for (double v : row) z += v;
    for (double& v : row) v /= z;
  }
  return q;
}

/// Mutual information in its KL form, (1/S) sum_s KL(p_s || mean).
inline double bald_kl_form(const std::vector<std::vector<double>>& raw) {
  auto p = rows_normalized(raw);
  const std::size_t s = p.size(), c = p[0].size();
  std::vector<long double> m(c, 0.0L);
  for (const auto& row : p)
    for (std::size_t k = 0; k < c; ++k) m[k] += row[k];
  for (auto& v : m) v /= static_cast<long double>(s);
  long double acc = 0;
  for (const auto& row : p)
    for (std::size_t k = 0; k < c; ++k)
      if (row[k] > 0) acc += row[k] * std::log(static_cast<long double>(row[k]) / m[k]);
  return static_cast<double>(acc / static_cast<long double>(s));
}

/// Mean over classes of the population std, two passes in long double.
inline double mean_std_two_pass(const std::vector<std::vector<double>>& raw) {
  auto p = rows_normalized(raw);
  const std::size_t s = p.size(), c = p[0].size();
  long double total = 0;
  for (std::size_t k = 0; k < c; ++k) {
    long double mu = 0;
    for (const auto& row : p) mu += row[k];
    mu /= static_cast<long double>(s);
    long double var = 0;
    for (const auto& row : p) var += (row[k] - mu) * (row[k] - mu);
    total += std::sqrt(var / static_cast<long double>(s));
  }
  return static_cast<double>(total / static_cast<long double>(c));
}

inline double variation_ratio_direct(const std::vector<std::vector<double>>& raw) {
  auto p = rows_normalized(raw);
  double best = 0;
  for (std::size_t k = 0; k < p[0].size(); ++k) {
    long double mu = 0;
    for (const auto& row : p) mu += row[k];
    best = std::max(best, static_cast<double>(mu / static_cast<long double>(p.size())));
  }
  return 1.0 - best;
}

}  // namespace bhn::testing
