#pragma once

// Uncertainty scores over Monte-Carlo predictive samples, ranking metrics,
// and correlation analysis of posterior draws. Entropies are in nats.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "bhn/error.hpp"
#include "bhn/tensor.hpp"

namespace bhn::uq {

/// Copy of an [S, C] sample array with every row rescaled to sum to 1.
inline Tensor renormalized(const Tensor& p) {
  if (p.rank() != 2) throw ShapeError("predictive samples must be [S, C]");
  Tensor out = p;
  for (std::size_t s = 0; s < p.rows(); ++s) {
    double z = 0;
    for (std::size_t c = 0; c < p.cols(); ++c) {
      if (!(p.at(s, c) >= 0)) throw DataError("predictive probabilities must be non-negative");
      z += p.at(s, c);
    }
    if (!(z > 0)) throw DataError("predictive sample row sums to zero");
    for (std::size_t c = 0; c < p.cols(); ++c) out.at(s, c) /= z;
  }
  return out;
}

namespace detail {
inline double entropy(const double* p, std::size_t n) {
  double h = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (p[i] > 0) h -= p[i] * std::log(p[i]);
  return h;
}
inline std::vector<double> mean_row(const Tensor& q) {
  std::vector<double> m(q.cols(), 0.0);
  for (std::size_t s = 0; s < q.rows(); ++s)
    for (std::size_t c = 0; c < q.cols(); ++c) m[c] += q.at(s, c);
  for (auto& v : m) v /= static_cast<double>(q.rows());
  return m;
}
}  // namespace detail

/// 1 - max_c mean_s p[s, c].
inline double variation_ratio(const Tensor& samples) {
  const auto m = detail::mean_row(renormalized(samples));
  return 1.0 - *std::max_element(m.begin(), m.end());
}

/// Entropy of the mean prediction.
inline double predictive_entropy(const Tensor& samples) {
  const auto m = detail::mean_row(renormalized(samples));
  return detail::entropy(m.data(), m.size());
}

/// Mutual information between prediction and parameters:
/// H[mean_s p_s] - mean_s H[p_s].
inline double bald(const Tensor& samples) {
  const Tensor q = renormalized(samples);
  const auto m = detail::mean_row(q);
  double inner = 0;
  for (std::size_t s = 0; s < q.rows(); ++s) inner += detail::entropy(q.data() + s * q.cols(), q.cols());
  return detail::entropy(m.data(), m.size()) - inner / static_cast<double>(q.rows());
}

/// Average over classes of the population standard deviation across samples.
inline double mean_std(const Tensor& samples) {
  const Tensor q = renormalized(samples);
  const auto m = detail::mean_row(q);
  double acc = 0;
  for (std::size_t c = 0; c < q.cols(); ++c) {
    double v = 0;
    for (std::size_t s = 0; s < q.rows(); ++s) v += (q.at(s, c) - m[c]) * (q.at(s, c) - m[c]);
    acc += std::sqrt(v / static_cast<double>(q.rows()));
  }
  return acc / static_cast<double>(q.cols());
}

enum class Score { VariationRatio, Bald, MeanStd, Entropy };

inline std::string to_string(Score s) {
  switch (s) {
    case Score::VariationRatio: return "variation_ratio";
    case Score::Bald: return "bald";
    case Score::MeanStd: return "mean_std";
    case Score::Entropy: return "entropy";
  }
  return "";
}

inline Score score_from_string(const std::string& s) {
  if (s == "variation_ratio" || s == "vr") return Score::VariationRatio;
  if (s == "bald") return Score::Bald;
  if (s == "mean_std" || s == "std") return Score::MeanStd;
  if (s == "entropy" || s == "max_entropy") return Score::Entropy;
  throw ConfigError("unknown score '" + s + "' (expected variation_ratio|bald|mean_std|entropy)");
}

inline double score(Score kind, const Tensor& samples) {
  switch (kind) {
    case Score::VariationRatio: return variation_ratio(samples);
    case Score::Bald: return bald(samples);
    case Score::MeanStd: return mean_std(samples);
    case Score::Entropy: return predictive_entropy(samples);
  }
  return 0;
}

/// Per-input scores from S sample arrays of shape [B, C].
inline std::vector<double> score_batch(Score kind, const std::vector<Tensor>& per_sample) {
  if (per_sample.empty()) throw ConfigError("no predictive samples to score");
  const std::size_t b = per_sample.front().rows(), c = per_sample.front().cols();
  std::vector<double> out(b);
  Tensor sc(Shape{per_sample.size(), c});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t s = 0; s < per_sample.size(); ++s)
      for (std::size_t k = 0; k < c; ++k) sc.at(s, k) = per_sample[s].at(i, k);
    out[i] = score(kind, sc);
  }
  return out;
}

namespace detail {
inline void check_scored(const std::vector<double>& scores, const std::vector<int>& labels, std::size_t& pos,
                         std::size_t& neg) {
  if (scores.size() != labels.size()) throw DataError("scores and labels differ in length");
  pos = neg = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!std::isfinite(scores[i])) throw DataError("score is not finite");
    (labels[i] ? pos : neg) += 1;
  }
  if (pos == 0 || neg == 0) throw DataError("AUC needs at least one positive and one negative example");
}

/// Indices ordered by descending score, grouped into runs of equal score.
inline std::vector<std::pair<std::size_t, std::size_t>> tie_groups(const std::vector<double>& scores,
                                                                   const std::vector<int>& labels) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::pair<std::size_t, std::size_t>> groups;  // (positives, negatives)
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i, p = 0, n = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? p : n) += 1;
      ++j;
    }
    groups.emplace_back(p, n);
    i = j;
  }
  return groups;
}
}  // namespace detail

/// P(score of a random positive > score of a random negative), ties
/// counting one half. Labels are nonzero for positives.
inline double auc_roc(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::size_t pos, neg;
  detail::check_scored(scores, labels, pos, neg);
  // Twice the Mann-Whitney count, kept in integers.
  std::uint64_t twice = 0, neg_above = 0;
  for (const auto& [p, n] : detail::tie_groups(scores, labels)) {
    twice += 2 * static_cast<std::uint64_t>(p) * (neg - neg_above - n) + static_cast<std::uint64_t>(p) * n;
    neg_above += n;
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

enum class Positive { Anomaly, Nominal };

/// Average precision: sum over distinct thresholds of
/// (recall increment) * precision, with tied scores entering together.
/// Positive::Nominal scores the flipped task (negated scores, flipped labels).
inline double auc_pr(const std::vector<double>& scores, const std::vector<int>& labels,
                     Positive positive_is = Positive::Anomaly) {
  std::vector<double> s = scores;
  std::vector<int> l = labels;
  if (positive_is == Positive::Nominal) {
    for (auto& v : s) v = -v;
    for (auto& v : l) v = v ? 0 : 1;
  }
  std::size_t pos, neg;
  detail::check_scored(s, l, pos, neg);
  double ap = 0;
  std::size_t tp = 0, fp = 0;
  for (const auto& [p, n] : detail::tie_groups(s, l)) {
    tp += p;
    fp += n;
    if (p) ap += static_cast<double>(p) / static_cast<double>(pos) * (static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  return ap;
}

/// Pairwise Pearson correlations of the columns of an [M, D] sample matrix,
/// with two-sided p-values from the t distribution on M - 2 degrees of
/// freedom. Pairs involving a constant column are marked missing.
struct Correlations {
  std::size_t dim = 0;
  std::vector<double> r;
  std::vector<double> p;
  std::vector<char> valid;

  double r_at(std::size_t i, std::size_t j) const { return r[i * dim + j]; }
  double p_at(std::size_t i, std::size_t j) const { return p[i * dim + j]; }
  bool has(std::size_t i, std::size_t j) const { return valid[i * dim + j] != 0; }
};

inline double pearson_p_value(double r, std::size_t m) {
  if (m < 3) throw ConfigError("p-values need at least 3 samples");
  const double df = static_cast<double>(m - 2);
  if (std::abs(r) >= 1.0) return 0.0;
  const double t = std::abs(r) * std::sqrt(df / (1.0 - r * r));
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, t));
}

inline Correlations posterior_correlations(const Tensor& samples) {
  if (samples.rank() != 2) throw ShapeError("posterior samples must be [M, D]");
  const std::size_t m = samples.rows(), d = samples.cols();
  if (m < 3) throw ConfigError("posterior correlations need at least 3 samples");
  std::vector<double> mean(d, 0.0), ss(d, 0.0);
  for (std::size_t k = 0; k < m; ++k)
    for (std::size_t j = 0; j < d; ++j) mean[j] += samples.at(k, j);
  for (auto& v : mean) v /= static_cast<double>(m);
  for (std::size_t k = 0; k < m; ++k)
    for (std::size_t j = 0; j < d; ++j) ss[j] += (samples.at(k, j) - mean[j]) * (samples.at(k, j) - mean[j]);
  Correlations c;
  c.dim = d;
  c.r.assign(d * d, 0.0);
  c.p.assign(d * d, 1.0);
  c.valid.assign(d * d, 0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      if (ss[i] == 0 || ss[j] == 0) continue;
      double cross = 0;
      for (std::size_t k = 0; k < m; ++k) cross += (samples.at(k, i) - mean[i]) * (samples.at(k, j) - mean[j]);
      const double r = std::clamp(cross / std::sqrt(ss[i] * ss[j]), -1.0, 1.0);
      const double p = pearson_p_value(r, m);
      for (auto [a, b] : {std::pair{i, j}, std::pair{j, i}}) {
        c.r[a * d + b] = r;
        c.p[a * d + b] = p;
        c.valid[a * d + b] = 1;
      }
    }
  return c;
}

}  // namespace bhn::uq
