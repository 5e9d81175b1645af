#pragma once

// Weight-normalized feed-forward network whose per-unit scales g are an
// input rather than a parameter. Unit j of layer l computes
//   a_{l,j} = g_{l,j} * <v_{l,j} / |v_{l,j}|, input> + b_{l,j}
// and g is laid out layer-major, unit-minor in one flat vector of length D.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"

#include "bhn/error.hpp"
#include "bhn/graph.hpp"
#include "bhn/params.hpp"
#include "bhn/rng.hpp"
#include "bhn/tensor.hpp"

namespace bhn::net {

using diff::Graph;
using diff::Var;
using json = nlohmann::json;

enum class Activation { Relu, Tanh, Linear };
enum class Head { Regression, Classifier };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::Relu: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Linear: return "linear";
  }
  return "linear";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  if (s == "linear") return Activation::Linear;
  throw ConfigError("unknown activation '" + s + "' (expected relu|tanh|linear)");
}

inline std::string to_string(Head h) { return h == Head::Classifier ? "classifier" : "regression"; }

inline Head head_from_string(const std::string& s) {
  if (s == "classifier" || s == "classification") return Head::Classifier;
  if (s == "regression") return Head::Regression;
  throw ConfigError("unknown task head '" + s + "' (expected classifier|regression)");
}

struct LayerSpec {
  std::size_t units = 1;
  Activation activation = Activation::Relu;
};

/// Layer sizes plus task head. The last layer is the head and is always
/// linear (logits for a classifier, the predictive mean for regression).
struct PrimaryNetSpec {
  std::size_t inputs = 1;
  std::vector<LayerSpec> layers;
  Head head = Head::Classifier;

  static PrimaryNetSpec mlp(std::size_t inputs, const std::vector<std::size_t>& hidden, std::size_t outputs,
                            Head head, Activation act = Activation::Relu) {
    PrimaryNetSpec s;
    s.inputs = inputs;
    s.head = head;
    for (auto h : hidden) s.layers.push_back({h, act});
    s.layers.push_back({outputs, Activation::Linear});
    s.validate();
    return s;
  }

  void validate() const {
    if (inputs == 0) throw ConfigError("primary net needs at least one input");
    if (layers.empty()) throw ConfigError("primary net needs at least one layer");
    for (std::size_t l = 0; l < layers.size(); ++l)
      if (layers[l].units == 0) throw ConfigError("layer " + std::to_string(l) + " has no units");
    if (head == Head::Classifier && outputs() < 2) throw ConfigError("classifier head needs at least 2 classes");
    if (head == Head::Regression && outputs() != 1) throw ConfigError("regression head must have exactly 1 output");
  }

  std::size_t outputs() const { return layers.back().units; }
  std::size_t fan_in(std::size_t l) const { return l == 0 ? inputs : layers[l - 1].units; }

  /// Total number of units, i.e. the length of g.
  std::size_t scale_dim() const {
    std::size_t d = 0;
    for (const auto& l : layers) d += l.units;
    return d;
  }
  std::size_t offset(std::size_t layer) const {
    std::size_t o = 0;
    for (std::size_t l = 0; l < layer; ++l) o += layers[l].units;
    return o;
  }

  static std::string prefix(std::size_t layer) {
    return std::string("net.") + (layer < 10 ? "0" : "") + std::to_string(layer) + ".";
  }

  json to_json() const {
    json ls = json::array();
    for (const auto& l : layers) ls.push_back({{"units", l.units}, {"activation", to_string(l.activation)}});
    return {{"inputs", inputs}, {"head", to_string(head)}, {"layers", ls}};
  }
  static PrimaryNetSpec from_json(const json& j) {
    try {
      PrimaryNetSpec s;
      s.inputs = j.at("inputs").get<std::size_t>();
      s.head = head_from_string(j.at("head").get<std::string>());
      for (const auto& l : j.at("layers"))
        s.layers.push_back({l.at("units").get<std::size_t>(), activation_from_string(l.at("activation"))});
      s.validate();
      return s;
    } catch (const json::exception& e) {
      throw FormatError(std::string("malformed primary net description: ") + e.what());
    }
  }
};

/// Splits a flat g of length D into one vector per layer.
inline std::vector<Tensor> slice_g(const PrimaryNetSpec& spec, const Tensor& g) {
  if (g.size() != spec.scale_dim())
    throw ShapeError("g has length " + std::to_string(g.size()) + " but the primary net has " +
                     std::to_string(spec.scale_dim()) + " units");
  std::vector<Tensor> out;
  std::size_t o = 0;
  for (const auto& l : spec.layers) {
    std::vector<double> part(g.data() + o, g.data() + o + l.units);
    out.push_back(Tensor(Shape{l.units}, std::move(part)));
    o += l.units;
  }
  return out;
}

inline Tensor concat_g(const std::vector<Tensor>& parts) {
  std::vector<double> all;
  for (const auto& p : parts) all.insert(all.end(), p.data(), p.data() + p.size());
  if (all.empty()) throw ShapeError("cannot concatenate an empty g");
  const std::size_t n = all.size();
  return Tensor(Shape{n}, std::move(all));
}

/// Names of the direction and bias parameters of every layer.
inline std::vector<std::string> parameter_names(const PrimaryNetSpec& spec) {
  std::vector<std::string> n;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    n.push_back(PrimaryNetSpec::prefix(l) + "v");
    n.push_back(PrimaryNetSpec::prefix(l) + "b");
  }
  return n;
}

enum class BiasInit { Zero, FanIn };

/// He-style fan-in scaled directions. Biases are zero, or uniform on
/// +-1/sqrt(fan_in); with zero biases and one-signed inputs every ReLU unit
/// starts out linear over the data.
inline void init(const PrimaryNetSpec& spec, ParameterSet& params, Rng& rng, BiasInit bias = BiasInit::Zero) {
  spec.validate();
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const std::size_t in = spec.fan_in(l), out = spec.layers[l].units;
    params.set(PrimaryNetSpec::prefix(l) + "v",
               rng.normal_tensor({out, in}, std::sqrt(2.0 / static_cast<double>(in))));
    const double r = 1.0 / std::sqrt(static_cast<double>(in));
    params.set(PrimaryNetSpec::prefix(l) + "b",
               bias == BiasInit::Zero ? Tensor(Shape{out}, 0.0) : rng.uniform_tensor({out}, -r, r));
  }
}

struct BuildOptions {
  bool dropout = false;  // multiply hidden activations by leaves "mask.NN"
};

inline std::string mask_name(std::size_t layer) {
  return std::string("mask.") + (layer < 10 ? "0" : "") + std::to_string(layer);
}

/// Appends the network to `graph`. `x` is [B, inputs]; `g` is [1, D] (shared
/// across the batch) or [B, D] (one row per example). Returns the head
/// output [B, outputs].
inline Var build(Graph& graph, const PrimaryNetSpec& spec, Var x, Var g, const BuildOptions& opt = {}) {
  Var h = x;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& ls = spec.layers[l];
    const std::string p = PrimaryNetSpec::prefix(l);
    std::vector<std::size_t> cols(ls.units);
    const std::size_t o = spec.offset(l);
    for (std::size_t j = 0; j < ls.units; ++j) cols[j] = o + j;
    auto v = graph.leaf(p + "v");
    auto unit = v / graph.l2norm(v, 1);
    auto pre = matmul(h, transpose(unit)) * graph.gather(g, cols) + graph.leaf(p + "b");
    graph.label(pre, "layer " + std::to_string(l) + " pre-activation");
    switch (ls.activation) {
      case Activation::Relu: h = relu(pre); break;
      case Activation::Tanh: h = tanh(pre); break;
      case Activation::Linear: h = pre; break;
    }
    if (opt.dropout && l + 1 < spec.layers.size()) h = h * graph.leaf(mask_name(l));
  }
  return h;
}

/// Softmax clipped into [0.001, 0.999] per component, without renormalizing.
inline Var clipped_softmax(Graph& graph, Var logits) { return graph.clip(graph.softmax(logits), 1e-3, 0.999); }

inline Tensor clipped_softmax(const Tensor& logits) {
  Tensor l = logits.rank() == 1 ? logits.reshaped({1, logits.size()}) : logits;
  if (l.cols() < 2) throw ShapeError("softmax needs at least 2 classes");
  Tensor p(l.shape());
  for (std::size_t r = 0; r < l.rows(); ++r) {
    double mx = l.at(r, 0);
    for (std::size_t c = 1; c < l.cols(); ++c) mx = std::max(mx, l.at(r, c));
    double z = 0;
    for (std::size_t c = 0; c < l.cols(); ++c) z += std::exp(l.at(r, c) - mx);
    for (std::size_t c = 0; c < l.cols(); ++c)
      p.at(r, c) = std::clamp(std::exp(l.at(r, c) - mx) / z, 1e-3, 0.999);
  }
  return logits.rank() == 1 ? p.reshaped({logits.size()}) : p;
}

/// Inverted-dropout masks for every hidden layer: each entry is 0 with
/// probability `rate`, else 1/(1-rate).
inline void dropout_masks(const PrimaryNetSpec& spec, double rate, std::size_t batch, Rng& rng,
                          diff::Bindings& b) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must be in [0, 1)");
  const double keep = 1.0 / (1.0 - rate);
  for (std::size_t l = 0; l + 1 < spec.layers.size(); ++l) {
    Tensor m(Shape{batch, spec.layers[l].units});
    for (auto& v : m.storage()) v = rate > 0.0 && rng.bernoulli(rate) ? 0.0 : keep;
    b[mask_name(l)] = std::move(m);
  }
}

inline void fixed_masks(const PrimaryNetSpec& spec, double value, std::size_t batch, diff::Bindings& b) {
  for (std::size_t l = 0; l + 1 < spec.layers.size(); ++l)
    b[mask_name(l)] = Tensor(Shape{batch, spec.layers[l].units}, value);
}

namespace detail {
inline void check_input(const PrimaryNetSpec& spec, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != spec.inputs)
    throw ShapeError("layer 0: expected input of width " + std::to_string(spec.inputs) + ", got " +
                     shape_str(x.shape()));
}
inline void check_params(const PrimaryNetSpec& spec, const ParameterSet& params) {
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& v = params.get(PrimaryNetSpec::prefix(l) + "v");
    const auto& b = params.get(PrimaryNetSpec::prefix(l) + "b");
    if (v.rank() != 2 || v.rows() != spec.layers[l].units || v.cols() != spec.fan_in(l) ||
        b.size() != spec.layers[l].units)
      throw ShapeError("layer " + std::to_string(l) + ": parameters do not match the layer size");
  }
}
}  // namespace detail

/// Forward pass outside any training graph. `g` is [D], [1, D] or [B, D].
class Evaluator {
 public:
  explicit Evaluator(PrimaryNetSpec spec, BuildOptions opt = {}) : spec_(std::move(spec)), opt_(opt) {
    spec_.validate();
    out_ = build(graph_, spec_, graph_.leaf("x"), graph_.leaf("g"), opt_).id();
  }

  Tensor operator()(const ParameterSet& params, const Tensor& g, const Tensor& x,
                    const diff::Bindings* extra = nullptr) const {
    detail::check_input(spec_, x);
    detail::check_params(spec_, params);
    Tensor gr = g.rank() == 1 ? g.reshaped({1, g.size()}) : g;
    if (gr.cols() != spec_.scale_dim() || (gr.rows() != 1 && gr.rows() != x.rows()))
      throw ShapeError("g has shape " + shape_str(g.shape()) + " but the primary net has " +
                       std::to_string(spec_.scale_dim()) + " units");
    auto b = params.bindings();
    b["x"] = x;
    b["g"] = std::move(gr);
    if (extra)
      for (const auto& [k, t] : *extra) b[k] = t;
    return diff::forward(graph_, b, std::vector<std::uint32_t>{out_}).value(out_);
  }

  const PrimaryNetSpec& spec() const { return spec_; }

 private:
  PrimaryNetSpec spec_;
  BuildOptions opt_;
  Graph graph_;
  std::uint32_t out_ = 0;
};

/// Head output for input batch `x` at scales `g`.
inline Tensor apply(const PrimaryNetSpec& spec, const ParameterSet& params, const Tensor& g, const Tensor& x) {
  return Evaluator(spec)(params, g, x);
}

/// One stochastic forward pass with a fresh dropout mask per example and
/// hidden unit (g fixed at 1).
inline Tensor mc_dropout_baseline(const PrimaryNetSpec& spec, const ParameterSet& params, double rate,
                                  const Tensor& x, Rng& rng) {
  detail::check_input(spec, x);
  diff::Bindings masks;
  dropout_masks(spec, rate, x.rows(), rng, masks);
  return Evaluator(spec, {true})(params, Tensor(Shape{spec.scale_dim()}, 1.0), x, &masks);
}

}  // namespace bhn::net
