#pragma once

// Fast gradient sign perturbations against a stochastic model, with the
// input gradient averaged over a fixed set of parameter draws.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bhn/bhn.hpp"
#include "bhn/data.hpp"
#include "bhn/error.hpp"
#include "bhn/uncertainty.hpp"

namespace bhn::attacks {

struct AttackConfig {
  std::vector<double> steps{0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3};
  std::size_t grad_samples = 1;
  double lo = 0.0;
  double hi = 1.0;
  // Differentiate the plain log-softmax (false) or the clipped likelihood.
  // The clip has zero gradient at its rails, so confidently classified
  // inputs receive no perturbation under the clipped loss.
  bool clipped_loss = false;

  void validate() const {
    if (grad_samples < 1) throw ConfigError("attack gradient samples must be at least 1");
    if (!(lo < hi)) throw ConfigError("attack clamp range is empty");
    for (std::size_t i = 0; i < steps.size(); ++i) {
      if (!(steps[i] >= 0)) throw ConfigError("attack step sizes must be non-negative");
      if (i && steps[i] < steps[i - 1]) throw ConfigError("attack step sizes must be sorted ascending");
    }
  }
};

/// Fixed parameter samples: one row of g per draw, plus dropout masks for
/// the dropout kind.
struct Draws {
  Tensor g;                            // [S, D]
  std::vector<diff::Bindings> masks;   // empty unless dropout
};

inline Draws draw(const Model& m, std::size_t s, std::size_t batch, Rng& rng) {
  Draws d;
  d.g = sample_g(m, s, rng);
  if (m.kind == ModelKind::Dropout)
    for (std::size_t k = 0; k < s; ++k) {
      diff::Bindings b;
      net::dropout_masks(m.net, m.dropout_rate, batch, rng, b);
      d.masks.push_back(std::move(b));
    }
  return d;
}

/// Gradient w.r.t. x of the true-label negative log-likelihood, averaged over
/// the draws, for each example of the batch.
class InputGradient {
 public:
  InputGradient(const Model& m, bool clipped) : model_(m) {
    if (!m.classifier()) throw ConfigError("attacks need a classifier");
    auto out = net::build(graph_, m.net, graph_.leaf("x"), graph_.leaf("g"), {m.kind == ModelKind::Dropout});
    const auto y = graph_.leaf("y");
    if (clipped) {
      graph_.set_output("loss", -sum(log(graph_.pick(net::clipped_softmax(graph_, out), y))));
    } else {
      auto log_z = log(graph_.sum(exp(out), 1));
      graph_.set_output("loss", sum(log_z - graph_.pick(out, y)));
    }
  }

  Tensor operator()(const Tensor& x, const Tensor& y, const Draws& d) const {
    Tensor total(x.shape(), 0.0);
    const std::size_t s = d.g.rows();
    for (std::size_t k = 0; k < s; ++k) {
      auto b = model_.params.bindings();
      b["x"] = x;
      b["y"] = y;
      b["g"] = d.g.row(k);
      if (!d.masks.empty())
        for (const auto& [n, t] : d.masks[k]) b[n] = t;
      auto gr = diff::gradient(graph_, b, "loss", {"x"}).at("x");
      for (std::size_t i = 0; i < total.size(); ++i) total[i] += gr[i];
    }
    for (auto& v : total.storage()) v /= static_cast<double>(s);
    return total;
  }

 private:
  const Model& model_;
  diff::Graph graph_;
};

/// clamp(x + step * sign(grad), lo, hi).
inline Tensor apply_sign_step(const Tensor& x, const Tensor& grad, double step, double lo, double hi) {
  Tensor out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double sg = grad[i] > 0 ? 1.0 : (grad[i] < 0 ? -1.0 : 0.0);
    out[i] = std::clamp(x[i] + step * sg, lo, hi);
  }
  return out;
}

inline Tensor fgs(const Model& m, const Tensor& x, const Tensor& y, const AttackConfig& cfg, double step, Rng& rng) {
  cfg.validate();
  if (!(step >= 0)) throw ConfigError("attack step must be non-negative");
  for (double v : x.storage())
    if (v < cfg.lo || v > cfg.hi) throw DataError("attack input lies outside the clamp range");
  if (step == 0) return x;
  auto d = draw(m, cfg.grad_samples, x.rows(), rng);
  return apply_sign_step(x, InputGradient(m, cfg.clipped_loss)(x, y, d), step, cfg.lo, cfg.hi);
}

struct SweepRecord {
  double step = 0;
  std::size_t grad_samples = 1;
  double accuracy = 0;
  std::map<std::string, double> score_mean;
  std::map<std::string, std::optional<double>> adversary_auc;  // adversarial vs clean
  std::map<std::string, std::optional<double>> error_auc;      // wrong vs right on adversarial inputs
};

namespace detail {
inline std::vector<std::size_t> argmax_rows(const Tensor& p) {
  std::vector<std::size_t> out(p.rows(), 0);
  for (std::size_t r = 0; r < p.rows(); ++r)
    for (std::size_t c = 1; c < p.cols(); ++c)
      if (p.at(r, c) > p.at(r, out[r])) out[r] = c;
  return out;
}
inline std::optional<double> safe_auc(const std::vector<double>& s, const std::vector<int>& l) {
  std::size_t pos = 0;
  for (int v : l) pos += v != 0;
  if (pos == 0 || pos == l.size()) return std::nullopt;
  return uq::auc_roc(s, l);
}
}  // namespace detail

/// Accuracy, mean scores and detection AUCs at every step size. Every step
/// reuses the same gradient draws (taken at the clean inputs) and the same
/// evaluation draws, so rows differ only through the step size.
inline std::vector<SweepRecord> attack_sweep(const Model& m, const Dataset& test, const AttackConfig& cfg,
                                             std::size_t eval_samples, const std::vector<uq::Score>& scores,
                                             std::uint64_t seed) {
  cfg.validate();
  if (test.empty()) throw DataError("attack sweep needs a non-empty test set");
  const Tensor x = test.inputs(), y = test.targets();
  Rng grad_rng(seed);
  const auto draws = draw(m, cfg.grad_samples, x.rows(), grad_rng);
  const Tensor grad = InputGradient(m, cfg.clipped_loss)(x, y, draws);
  const std::uint64_t eval_seed = Rng(seed ^ 0x9e3779b97f4a7c15ull).next_seed();

  Rng clean_rng(eval_seed);
  const auto clean = predict(m, x, eval_samples, clean_rng);
  std::map<std::string, std::vector<double>> clean_scores;
  for (auto s : scores) clean_scores[uq::to_string(s)] = uq::score_batch(s, clean.samples);

  std::vector<SweepRecord> out;
  for (double step : cfg.steps) {
    const Tensor xa = apply_sign_step(x, grad, step, cfg.lo, cfg.hi);
    Rng er(eval_seed);
    const auto pred = predict(m, xa, eval_samples, er);
    SweepRecord rec;
    rec.step = step;
    rec.grad_samples = cfg.grad_samples;
    rec.accuracy = accuracy(pred.mean, test);
    const auto hat = detail::argmax_rows(pred.mean);
    std::vector<int> wrong(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) wrong[i] = hat[i] != test.label(i);
    for (auto s : scores) {
      const std::string name = uq::to_string(s);
      const auto adv = uq::score_batch(s, pred.samples);
      double mean = 0;
      for (double v : adv) mean += v;
      rec.score_mean[name] = mean / static_cast<double>(adv.size());
      // Positives are the perturbed copies, negatives the clean originals.
      std::vector<double> both = adv;
      both.insert(both.end(), clean_scores[name].begin(), clean_scores[name].end());
      std::vector<int> lab(adv.size(), 1);
      lab.resize(both.size(), 0);
      rec.adversary_auc[name] = detail::safe_auc(both, lab);
      rec.error_auc[name] = detail::safe_auc(adv, wrong);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace bhn::attacks
