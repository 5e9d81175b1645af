#pragma once

// Bayesian hypernetwork: a flow h maps noise eps to per-unit scales g of a
// weight-normalized primary net. Training maximizes the minibatch ELBO
//   (N/B) sum_i log p(y_i | x_i, g) + log p(g) - log q(g),   g = h(eps),
// and prediction averages the primary net's outputs over S draws of g.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "bhn/data.hpp"
#include "bhn/error.hpp"
#include "bhn/flows.hpp"
#include "bhn/graph.hpp"
#include "bhn/optim.hpp"
#include "bhn/params.hpp"
#include "bhn/primary_net.hpp"
#include "bhn/rng.hpp"
#include "bhn/tensor.hpp"

namespace bhn {

using json = nlohmann::json;

/// Isotropic Gaussian prior N(0, lambda I) on g.
struct PriorConfig {
  double lambda = 1.0;
  void validate() const {
    if (!(lambda > 0)) throw ConfigError("prior variance lambda must be positive");
  }
};

/// Bhn: g drawn from the flow. Mle: g fixed at 1. Dropout: g fixed at 1 with
/// Bernoulli masks on hidden units at train and test time.
enum class ModelKind { Bhn, Mle, Dropout };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::Bhn: return "bhn";
    case ModelKind::Mle: return "mle";
    case ModelKind::Dropout: return "dropout";
  }
  return "bhn";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "bhn") return ModelKind::Bhn;
  if (s == "mle" || s == "map") return ModelKind::Mle;
  if (s == "dropout" || s == "mc-dropout") return ModelKind::Dropout;
  throw ConfigError("unknown model kind '" + s + "' (expected bhn|mle|dropout)");
}

/// Name of the learned homoscedastic log-variance of the regression likelihood.
inline const std::string kLogVar = "lik.log_var";
/// Point-estimate scales [1, D] of the mle and dropout kinds.
inline const std::string kPointScale = "point.g";

struct Model {
  ModelKind kind = ModelKind::Bhn;
  flows::FlowStack flow;
  net::PrimaryNetSpec net;
  ParameterSet params;
  PriorConfig prior;
  double dropout_rate = 0.0;

  std::size_t scale_dim() const { return net.scale_dim(); }
  bool classifier() const { return net.head == net::Head::Classifier; }

  void validate() const {
    net.validate();
    prior.validate();
    if (kind == ModelKind::Bhn && flow.dim() != net.scale_dim())
      throw ConfigError("flow dimension " + std::to_string(flow.dim()) + " does not match the " +
                        std::to_string(net.scale_dim()) + " primary-net units");
    if (!(dropout_rate >= 0 && dropout_rate < 1)) throw ConfigError("dropout rate must be in [0, 1)");
  }

  json describe() const {
    json j = {{"kind", to_string(kind)},
              {"net", net.to_json()},
              {"prior_lambda", prior.lambda},
              {"dropout_rate", dropout_rate}};
    if (kind == ModelKind::Bhn) j["flow"] = flow.to_json();
    return j;
  }
  static Model from_description(const json& j) {
    try {
      Model m;
      m.kind = model_kind_from_string(j.at("kind").get<std::string>());
      m.net = net::PrimaryNetSpec::from_json(j.at("net"));
      m.prior.lambda = j.at("prior_lambda").get<double>();
      m.dropout_rate = j.at("dropout_rate").get<double>();
      if (m.kind == ModelKind::Bhn) m.flow = flows::FlowStack::from_json(j.at("flow"));
      m.validate();
      return m;
    } catch (const json::exception& e) {
      throw FormatError(std::string("malformed model description: ") + e.what());
    }
  }
};

struct ModelInit {
  flows::FlowKind flow_kind = flows::FlowKind::Coupling;
  std::size_t flow_depth = 4;
  std::size_t flow_hidden = 200;
  flows::FlowInit flow_init{1e-2, 1.0, std::log(0.1)};
  double log_var = 2 * std::log(0.1);  // regression only
  net::BiasInit bias = net::BiasInit::Zero;
};

/// Builds and initializes a model; the flow's layer structure (coupling
/// orientation, MADE degrees, permutations) is seeded from `rng`.
inline Model make_model(ModelKind kind, const net::PrimaryNetSpec& spec, Rng& rng, const ModelInit& init = {},
                        PriorConfig prior = {}, double dropout_rate = 0.0) {
  Model m;
  m.kind = kind;
  m.net = spec;
  m.prior = prior;
  m.dropout_rate = kind == ModelKind::Dropout ? dropout_rate : 0.0;
  if (kind == ModelKind::Bhn) {
    const std::size_t depth = init.flow_kind == flows::FlowKind::None ? 0 : init.flow_depth;
    m.flow = flows::FlowStack::make(depth == 0 ? flows::FlowKind::None : init.flow_kind, spec.scale_dim(), depth,
                                    init.flow_hidden, rng.next_seed());
    flows::init_small(m.flow, m.params, rng, init.flow_init.scale, init.flow_init.mean, init.flow_init.log_sigma);
  }
  net::init(spec, m.params, rng, init.bias);
  if (kind != ModelKind::Bhn) m.params.set(kPointScale, Tensor(Shape{1, spec.scale_dim()}, 1.0));
  if (spec.head == net::Head::Regression) m.params.set(kLogVar, Tensor::vector({init.log_var}));
  m.validate();
  return m;
}

/// One Monte-Carlo estimate of the minibatch ELBO terms, in nats. log_lik is
/// already rescaled to the full dataset; log_prior and log_q are averaged
/// over the noise rows used.
struct ElboEstimate {
  double log_lik = 0;
  double log_prior = 0;
  double log_q = 0;
  double elbo = 0;
};

/// Fixed graph of the training objective. Shapes come from the bindings, so
/// one graph serves every batch size.
class Objective {
 public:
  explicit Objective(const Model& m) : model_kind_(m.kind), dim_(m.scale_dim()) {
    using namespace diff;
    Var g;
    if (m.kind == ModelKind::Bhn) {
      auto fo = m.flow.build(graph_, graph_.leaf("eps"));
      g = fo.g;
      const double lam = m.prior.lambda;
      auto lp_rows = sum(square(g), 1) * (-0.5 / lam) -
                     0.5 * static_cast<double>(dim_) * std::log(2 * std::numbers::pi * lam);
      lp_ = mean(lp_rows).id();
      lq_ = mean(fo.log_q).id();
    } else {
      g = graph_.leaf(kPointScale);
    }
    auto out = net::build(graph_, m.net, graph_.leaf("x"), g, {m.kind == ModelKind::Dropout});
    out_ = out.id();
    Var ll;
    if (m.classifier()) {
      ll = sum(log(graph_.pick(net::clipped_softmax(graph_, out), graph_.leaf("y"))));
    } else {
      auto lv = graph_.leaf(kLogVar);
      auto per = square(graph_.leaf("y") - out) * exp(-lv) * -0.5 - lv * 0.5;
      ll = sum(per - 0.5 * std::log(2 * std::numbers::pi));
    }
    ll_ = ll.id();
    Var total = ll * graph_.leaf("c.ll_scale");
    if (m.kind == ModelKind::Bhn) {
      auto kl = Var{&graph_, lp_} - Var{&graph_, lq_};
      total = total + kl * graph_.leaf("c.kl_weight");
      total_kl_ = (kl * graph_.leaf("c.kl_weight") * graph_.leaf("c.inv_n") * -1.0).id();
    }
    obj_ = (total * graph_.leaf("c.inv_n") * -1.0).id();
  }

  /// Everything a single evaluation needs besides the parameters.
  struct Inputs {
    const Tensor* x = nullptr;  // [B, in] or null for an empty batch
    const Tensor* y = nullptr;  // [B, 1]
    Tensor eps;                 // [R, D], Bhn only
    diff::Bindings masks;       // dropout masks
    double n_total = 1;
    double kl_weight = 1;
  };

  ElboEstimate evaluate(const ParameterSet& params, const Inputs& in) const {
    auto b = bind(params, in);
    std::vector<std::uint32_t> targets;
    if (in.x) targets.push_back(ll_);
    if (model_kind_ == ModelKind::Bhn) {
      targets.push_back(lp_);
      targets.push_back(lq_);
    }
    if (targets.empty()) return {};
    auto ev = diff::forward(graph_, b, targets);
    return read(ev, in);
  }

  /// Gradient of -(weighted ELBO)/N_total with respect to `wrt`.
  std::pair<ElboEstimate, GradMap> gradient(const ParameterSet& params, const Inputs& in,
                                            const std::vector<std::string>& wrt) const {
    auto b = bind(params, in);
    if (!in.x) {
      if (model_kind_ != ModelKind::Bhn) {
        GradMap zero;
        for (const auto& n : wrt) zero.emplace(n, Tensor(params.get(n).shape(), 0.0));
        return {ElboEstimate{}, zero};
      }
      auto r = diff::value_and_gradient(graph_, b, total_kl_, wrt);
      return {read(r.values, in), std::move(r.wrt)};
    }
    auto r = diff::value_and_gradient(graph_, b, obj_, wrt);
    return {read(r.values, in), std::move(r.wrt)};
  }

  bool has_leaf(const std::string& name) const { return graph_.find_leaf(name).has_value(); }

 private:
  diff::Bindings bind(const ParameterSet& params, const Inputs& in) const {
    auto b = params.bindings();
    if (model_kind_ == ModelKind::Bhn) {
      if (in.eps.rank() != 2 || in.eps.cols() != dim_)
        throw ShapeError("noise must be [R, " + std::to_string(dim_) + "], got " + shape_str(in.eps.shape()));
      b["eps"] = in.eps;
    } else if (!params.contains(kPointScale)) {
      b[kPointScale] = Tensor(Shape{1, dim_}, 1.0);
    }
    if (in.x) {
      b["x"] = *in.x;
      b["y"] = *in.y;
      b["c.ll_scale"] = Tensor::scalar(in.n_total / static_cast<double>(in.x->rows()));
    } else {
      b["c.ll_scale"] = Tensor::scalar(0.0);
    }
    b["c.kl_weight"] = Tensor::scalar(in.kl_weight);
    b["c.inv_n"] = Tensor::scalar(1.0 / std::max(in.n_total, 1.0));
    for (const auto& [k, t] : in.masks) b[k] = t;
    return b;
  }

  ElboEstimate read(const diff::Evaluation& ev, const Inputs& in) const {
    ElboEstimate e;
    if (in.x) e.log_lik = ev.value(ll_).item() * in.n_total / static_cast<double>(in.x->rows());
    if (model_kind_ == ModelKind::Bhn) {
      e.log_prior = ev.value(lp_).item();
      e.log_q = ev.value(lq_).item();
    }
    e.elbo = e.log_lik + e.log_prior - e.log_q;
    if (!std::isfinite(e.log_lik)) throw NumericalError("ELBO term log_lik is not finite");
    if (!std::isfinite(e.log_prior)) throw NumericalError("ELBO term log_prior is not finite");
    if (!std::isfinite(e.log_q)) throw NumericalError("ELBO term log_q is not finite");
    return e;
  }

  ModelKind model_kind_;
  std::size_t dim_;
  diff::Graph graph_;
  std::uint32_t lp_ = 0, lq_ = 0, ll_ = 0, out_ = 0, obj_ = 0, total_kl_ = 0;
};

/// ELBO estimate for one minibatch with a fresh noise draw (shared by the
/// batch unless `per_example_noise`).
inline ElboEstimate elbo_minibatch(const Model& m, const Dataset& batch, std::size_t n_total, Rng& rng,
                                   bool per_example_noise = false) {
  if (batch.size() > n_total) throw ConfigError("minibatch is larger than the dataset");
  Objective obj(m);
  Objective::Inputs in;
  std::optional<Tensor> x, y;
  if (!batch.empty()) {
    x = batch.inputs();
    y = batch.targets();
    in.x = &*x;
    in.y = &*y;
  }
  in.n_total = static_cast<double>(n_total);
  const std::size_t rows = per_example_noise && !batch.empty() ? batch.size() : 1;
  if (m.kind == ModelKind::Bhn) in.eps = rng.normal_tensor({rows, m.scale_dim()});
  if (m.kind == ModelKind::Dropout && !batch.empty())
    net::dropout_masks(m.net, m.dropout_rate, batch.size(), rng, in.masks);
  return obj.evaluate(m.params, in);
}

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 128;
  double clip_norm = 10.0;
  std::size_t epochs = 10;
  std::size_t mc_samples = 1;
  std::uint64_t seed = 0;
  std::size_t warmup_epochs = 0;
  bool per_example_noise = false;
  std::vector<std::string> frozen;  // exact names, or prefixes ending in '*'

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch size must be at least 1");
    if (!(clip_norm > 0)) throw ConfigError("gradient clip norm must be positive");
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
    if (mc_samples < 1) throw ConfigError("mc samples per step must be at least 1");
  }
  AdamConfig adam() const { return {lr, beta1, beta2, adam_eps}; }
};

inline bool is_frozen(const std::string& name, const std::vector<std::string>& frozen) {
  for (const auto& f : frozen) {
    if (f == name) return true;
    if (!f.empty() && f.back() == '*' && name.compare(0, f.size() - 1, f, 0, f.size() - 1) == 0) return true;
  }
  return false;
}

/// Everything that evolves during training. Saving and restoring this
/// resumes a run bit-identically.
struct TrainState {
  Model model;
  Adam optimizer;
  Rng rng;
  std::size_t epoch = 0;

  TrainState(Model m, const TrainConfig& cfg) : model(std::move(m)), optimizer(cfg.adam()), rng(cfg.seed) {}
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double elbo = 0;
  double log_lik = 0;
  double log_prior = 0;
  double log_q = 0;
  double grad_norm = 0;
  double kl_weight = 1;
  std::map<std::string, double> extra;
};

struct TrainReport {
  std::vector<EpochMetrics> epochs;
  bool diverged = false;
  std::string message;
};

using EpochHook = std::function<void(const TrainState&, EpochMetrics&)>;

inline std::vector<std::string> trainable(const Model& m, const Objective& obj, const TrainConfig& cfg) {
  std::vector<std::string> names;
  for (const auto& [name, _] : m.params)
    if (obj.has_leaf(name) && !is_frozen(name, cfg.frozen)) names.push_back(name);
  return names;
}

namespace detail {
inline bool finite(const GradMap& g) {
  for (const auto& [_, t] : g)
    if (!t.all_finite()) return false;
  return true;
}
inline bool finite(const ParameterSet& p) {
  for (const auto& [_, t] : p)
    if (!t.all_finite()) return false;
  return true;
}
}  // namespace detail

/// Runs `cfg.epochs` further epochs of Adam on -ELBO / N (or -log-lik / N for
/// the point-estimate kinds). A non-finite objective, gradient or update
/// stops training with the parameters of the last good step.
inline TrainReport train(TrainState& st, const Dataset& data, const TrainConfig& cfg, const EpochHook& hook = {}) {
  cfg.validate();
  st.model.validate();
  data.validate();
  if (data.dim != st.model.net.inputs) throw DataError("dataset width does not match the primary net inputs");
  if (st.model.classifier() && data.classes != st.model.net.outputs())
    throw DataError("dataset class count does not match the classifier head");

  Objective obj(st.model);
  const auto wrt = trainable(st.model, obj, cfg);
  const std::size_t n = data.size();
  const std::size_t dim = st.model.scale_dim();
  TrainReport report;

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    EpochMetrics em;
    em.kl_weight = cfg.warmup_epochs == 0
                       ? 1.0
                       : std::min(1.0, static_cast<double>(st.epoch) / static_cast<double>(cfg.warmup_epochs));
    auto order = st.rng.permutation(n);
    std::size_t batches = 0;
    for (std::size_t start = 0; start < std::max<std::size_t>(n, 1); start += cfg.batch_size) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(std::min(start, n)),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(start + cfg.batch_size, n)));
      std::optional<Tensor> x, y;
      Objective::Inputs in;
      if (!idx.empty()) {
        x = data.inputs(idx);
        y = data.targets(idx);
        in.x = &*x;
        in.y = &*y;
      }
      in.n_total = static_cast<double>(std::max<std::size_t>(n, 1));
      in.kl_weight = em.kl_weight;

      GradMap total;
      ElboEstimate est_sum;
      bool ok = true;
      try {
        for (std::size_t s = 0; s < cfg.mc_samples; ++s) {
          const std::size_t rows = cfg.per_example_noise && !idx.empty() ? idx.size() : 1;
          if (st.model.kind == ModelKind::Bhn) in.eps = st.rng.normal_tensor({rows, dim});
          if (st.model.kind == ModelKind::Dropout && !idx.empty())
            net::dropout_masks(st.model.net, st.model.dropout_rate, idx.size(), st.rng, in.masks);
          auto [est, grads] = obj.gradient(st.model.params, in, wrt);
          est_sum.log_lik += est.log_lik;
          est_sum.log_prior += est.log_prior;
          est_sum.log_q += est.log_q;
          est_sum.elbo += est.elbo;
          if (total.empty()) {
            total = std::move(grads);
          } else {
            for (auto& [k, t] : total)
              for (std::size_t i = 0; i < t.size(); ++i) t[i] += grads.at(k)[i];
          }
        }
      } catch (const NumericalError& err) {
        ok = false;
        report.message = err.what();
      }
      const double inv = 1.0 / static_cast<double>(cfg.mc_samples);
      if (ok) {
        for (auto& [_, t] : total)
          for (double& v : t.storage()) v *= inv;
        ok = detail::finite(total);
        if (!ok) report.message = "non-finite gradient";
      }
      if (ok) {
        ParameterSet before = st.model.params;
        Adam opt_before = st.optimizer;
        em.grad_norm += clip_by_global_norm(total, cfg.clip_norm);
        st.optimizer.step(st.model.params, total);
        if (!detail::finite(st.model.params)) {
          st.model.params = std::move(before);
          st.optimizer = std::move(opt_before);
          ok = false;
          report.message = "non-finite parameter after update";
        }
      }
      if (!ok) {
        report.diverged = true;
        report.message = "training diverged in epoch " + std::to_string(st.epoch + 1) + ": " + report.message;
        return report;
      }
      em.log_lik += est_sum.log_lik * inv;
      em.log_prior += est_sum.log_prior * inv;
      em.log_q += est_sum.log_q * inv;
      em.elbo += est_sum.elbo * inv;
      ++batches;
    }
    const double k = 1.0 / static_cast<double>(batches);
    em.log_lik *= k;
    em.log_prior *= k;
    em.log_q *= k;
    em.elbo *= k;
    em.grad_norm *= k;
    ++st.epoch;
    em.epoch = st.epoch;
    if (hook) hook(st, em);
    report.epochs.push_back(std::move(em));
  }
  return report;
}

/// Maximum-likelihood training of the point-estimate baselines.
inline TrainReport train_map_baseline(TrainState& st, const Dataset& data, const TrainConfig& cfg,
                                      const EpochHook& hook = {}) {
  if (st.model.kind == ModelKind::Bhn) throw ConfigError("train_map_baseline expects an mle or dropout model");
  return train(st, data, cfg, hook);
}

/// S draws of g from the approximate posterior, [S, D]. For the point-
/// estimate kinds every row is the learned point scale (1 if absent).
inline Tensor sample_g(const Model& m, std::size_t s, Rng& rng) {
  if (s == 0) throw ConfigError("need at least one sample");
  if (m.kind != ModelKind::Bhn) {
    Tensor out(Shape{s, m.scale_dim()}, 1.0);
    if (m.params.contains(kPointScale)) {
      const Tensor& p = m.params.get(kPointScale);
      for (std::size_t k = 0; k < s; ++k)
        for (std::size_t j = 0; j < out.cols(); ++j) out.at(k, j) = p[j];
    }
    return out;
  }
  return flows::FlowSampler(m.flow).sample_matrix(m.params, rng.normal_tensor({s, m.scale_dim()}));
}

/// Monte-Carlo predictive. Classifier: `samples[s]` holds clipped softmax
/// probabilities [B, C] and `mean` their average. Regression: `samples[s]`
/// holds predictive means [B, 1]; `mean` and `std` are their average and
/// population standard deviation over samples.
struct Prediction {
  Tensor mean;
  Tensor std;
  std::vector<Tensor> samples;
};

/// Fills mean and population std from `p.samples`.
inline void reduce_samples(Prediction& p) {
  if (p.samples.empty()) throw ConfigError("no samples to reduce");
  const auto& shape = p.samples.front().shape();
  // Running (Welford) moments: identical samples give their value and a
  // spread of exactly zero.
  p.mean = Tensor(shape, 0.0);
  Tensor m2(shape, 0.0);
  double k = 0;
  for (const auto& t : p.samples) {
    if (t.shape() != shape) throw ShapeError("prediction samples differ in shape");
    k += 1;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double d = t[i] - p.mean[i];
      p.mean[i] += d / k;
      m2[i] += d * (t[i] - p.mean[i]);
    }
  }
  p.std = Tensor(shape, 0.0);
  for (std::size_t i = 0; i < m2.size(); ++i) p.std[i] = std::sqrt(std::max(m2[i], 0.0) / k);
}

inline Prediction predict(const Model& m, const Tensor& x, std::size_t s, Rng& rng) {
  if (s == 0) throw ConfigError("predict needs S >= 1");
  const Tensor gs = sample_g(m, s, rng);
  net::Evaluator ev(m.net, {m.kind == ModelKind::Dropout});
  Prediction p;
  for (std::size_t k = 0; k < s; ++k) {
    diff::Bindings masks;
    if (m.kind == ModelKind::Dropout) net::dropout_masks(m.net, m.dropout_rate, x.rows(), rng, masks);
    Tensor out = ev(m.params, gs.row(k), x, &masks);
    p.samples.push_back(m.classifier() ? net::clipped_softmax(out) : std::move(out));
  }
  reduce_samples(p);
  return p;
}

/// Fraction of rows whose argmax matches the label.
inline double accuracy(const Tensor& probs, const Dataset& d) {
  if (probs.rows() != d.size()) throw ShapeError("prediction count does not match dataset size");
  std::size_t hit = 0;
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < probs.cols(); ++c)
      if (probs.at(r, c) > probs.at(r, best)) best = c;
    hit += best == d.label(r);
  }
  return static_cast<double>(hit) / static_cast<double>(d.size());
}

}  // namespace bhn
