#pragma once

#include <cmath>
#include <map>
#include <string>

#include "bhn/error.hpp"
#include "bhn/params.hpp"
#include "bhn/tensor.hpp"

namespace bhn {

using GradMap = std::map<std::string, Tensor>;

inline double global_norm(const GradMap& grads) {
  double s = 0;
  for (const auto& [_, g] : grads)
    for (double v : g.storage()) s += v * v;
  return std::sqrt(s);
}

/// Rescales all gradients together so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
inline double clip_by_global_norm(GradMap& grads, double max_norm) {
  const double n = global_norm(grads);
  if (n > max_norm && n > 0) {
    const double k = max_norm / n;
    for (auto& [_, g] : grads)
      for (double& v : g.storage()) v *= k;
  }
  return n;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam descent on named parameters. Moment estimates live in a
/// ParameterSet so they serialize with everything else.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(ParameterSet& params, const GradMap& grads, double lr_scale = 1.0) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double lr = cfg_.lr * lr_scale;
    for (const auto& [name, g] : grads) {
      Tensor& p = params.get(name);
      if (p.size() != g.size()) throw ShapeError("gradient for '" + name + "' has the wrong size");
      if (!moments_.contains("m." + name)) {
        moments_.set("m." + name, Tensor(p.shape(), 0.0));
        moments_.set("v." + name, Tensor(p.shape(), 0.0));
      }
      Tensor& m = moments_.get("m." + name);
      Tensor& v = moments_.get("v." + name);
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * g[i] * g[i];
        p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      }
    }
  }

  std::uint64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  const ParameterSet& moments() const { return moments_; }
  void restore(std::uint64_t t, ParameterSet moments) {
    t_ = t;
    moments_ = std::move(moments);
  }
  void reset() {
    t_ = 0;
    moments_ = {};
  }

  bool operator==(const Adam& o) const { return t_ == o.t_ && moments_ == o.moments_; }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  ParameterSet moments_;
};

}  // namespace bhn
