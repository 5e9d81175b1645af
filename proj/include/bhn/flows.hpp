#pragma once

// Invertible generators h: R^D -> R^D mapping standard-normal noise to
// posterior samples, with exact log-density by change of variables:
//   log q(h(eps)) = log N(eps; 0, I) - sum_layers log|det J_layer|.
//
// Each layer works on a batch of rows [M, D]; the log-determinant is tracked
// per row as an [M, 1] column.

#include <cmath>
#include <numbers>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "bhn/error.hpp"
#include "bhn/graph.hpp"
#include "bhn/params.hpp"
#include "bhn/rng.hpp"
#include "bhn/tensor.hpp"

namespace bhn::flows {

using diff::Graph;
using diff::Var;
using json = nlohmann::json;

/// Which family of transforms follows the elementwise base layer.
enum class FlowKind { None, Coupling, Iaf };

inline std::string to_string(FlowKind k) {
  switch (k) {
    case FlowKind::None: return "none";
    case FlowKind::Coupling: return "coupling";
    case FlowKind::Iaf: return "iaf";
  }
  return "none";
}

inline FlowKind flow_kind_from_string(const std::string& s) {
  if (s == "none" || s == "factorial") return FlowKind::None;
  if (s == "coupling" || s == "rnvp" || s == "realnvp") return FlowKind::Coupling;
  if (s == "iaf") return FlowKind::Iaf;
  throw ConfigError("unknown flow kind '" + s + "' (expected none|coupling|iaf)");
}

/// g = mu + exp(log_sigma) * x. Alone, this is the factorial Gaussian
/// posterior (zero coupling layers).
struct ElementwiseAffine {};

/// Affine coupling: one half conditions a scale and shift applied to the
/// other half. With transform_first == false the first `split` dims pass
/// through; otherwise the last D - split dims pass through.
struct CouplingLayer {
  std::size_t split = 1;
  bool transform_first = false;
  std::size_t hidden = 200;
};

/// Connectivity of a one-hidden-layer masked autoencoder.
struct MadeMasks {
  std::vector<std::size_t> input_degrees;   // per input dim, a permutation of 1..D
  std::vector<std::size_t> hidden_degrees;  // per hidden unit, in [1, D-1]
  Tensor input_to_hidden;                   // [H, D]
  Tensor hidden_to_output;                  // [D, H]
};

/// y = sigma * x + (1 - sigma) * m, sigma = sigmoid(s + bias_init), with m, s
/// produced by a MADE conditioner on x. Generative direction only.
struct IafLayer {
  MadeMasks masks;
  std::size_t hidden = 200;
  double bias_init = 2.0;
};

/// Fixed (not learned) reordering of dimensions: y[i] = x[perm[i]].
struct Permutation {
  std::vector<std::size_t> perm;
};

using Layer = std::variant<ElementwiseAffine, CouplingLayer, IafLayer, Permutation>;

/// Masks enforcing that output i depends only on inputs j with
/// degree(j) < degree(i). Hidden degrees cycle through 1..d-1 and are then
/// shuffled by `seed`, so every degree is represented once hidden >= d-1.
inline MadeMasks build_made_masks(std::size_t d, std::size_t hidden, const std::vector<std::size_t>& ordering,
                                  std::uint64_t seed) {
  if (d < 2) throw ConfigError("MADE needs at least 2 dimensions, got " + std::to_string(d));
  if (hidden < 1) throw ConfigError("MADE needs at least one hidden unit");
  if (ordering.size() != d) throw ConfigError("MADE ordering length does not match dimension");
  std::vector<char> seen(d + 1, 0);
  for (auto o : ordering) {
    if (o < 1 || o > d || seen[o]) throw ConfigError("MADE ordering must be a permutation of 1..d");
    seen[o] = 1;
  }
  MadeMasks m;
  m.input_degrees = ordering;
  m.hidden_degrees.resize(hidden);
  for (std::size_t k = 0; k < hidden; ++k) m.hidden_degrees[k] = k % (d - 1) + 1;
  Rng rng(seed);
  rng.shuffle(m.hidden_degrees.begin(), m.hidden_degrees.end());
  m.input_to_hidden = Tensor(Shape{hidden, d});
  m.hidden_to_output = Tensor(Shape{d, hidden});
  for (std::size_t k = 0; k < hidden; ++k)
    for (std::size_t j = 0; j < d; ++j)
      m.input_to_hidden.at(k, j) = m.hidden_degrees[k] >= m.input_degrees[j] ? 1.0 : 0.0;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < hidden; ++k)
      m.hidden_to_output.at(i, k) = m.input_degrees[i] > m.hidden_degrees[k] ? 1.0 : 0.0;
  return m;
}

inline std::vector<std::size_t> identity_ordering(std::size_t d) {
  std::vector<std::size_t> o(d);
  for (std::size_t i = 0; i < d; ++i) o[i] = i + 1;
  return o;
}

/// Graph handles produced by FlowStack::build.
struct FlowOutput {
  Var g;             // [M, D]
  Var log_q;         // [M, 1]
  Var base_log_prob; // [M, 1]
  Var logdet;        // [M, 1] (or scalar when only input-independent layers exist)
  std::vector<Var> layer_out;
  std::vector<Var> layer_logdet;  // invalid Var for permutations
};

struct FlowInit {
  double scale = 1e-2;      // stddev of coupling / conditioner output-layer weights
  double mean = 0.0;        // initial mu of the elementwise base layer
  double log_sigma = 0.0;   // initial log-scale of the elementwise base layer
};

/// One draw from the approximate posterior.
struct PosteriorSample {
  Tensor g;        // [D]
  Tensor epsilon;  // [D]
  double log_q = 0.0;
};

class FlowStack {
 public:
  FlowStack() = default;
  explicit FlowStack(std::size_t dim) : dim_(dim) {
    if (dim == 0) throw ConfigError("flow dimension must be positive");
  }

  /// `depth` layers of `kind` followed by the elementwise affine layer, so
  /// g = mu + sigma * f(eps). Coupling layers alternate which half is
  /// transformed; IAF layers are separated by fixed random permutations.
  static FlowStack make(FlowKind kind, std::size_t dim, std::size_t depth, std::size_t hidden, std::uint64_t seed,
                        bool with_base = true) {
    FlowStack s(dim);
    if (kind == FlowKind::None) {
      if (depth != 0) throw ConfigError("flow kind 'none' takes no layers");
      if (with_base) s.add(ElementwiseAffine{});
      return s;
    }
    Rng rng(seed);
    for (std::size_t i = 0; i < depth; ++i) {
      if (kind == FlowKind::Coupling) {
        if (dim < 2) throw ConfigError("coupling layers need dimension >= 2");
        s.add(CouplingLayer{dim / 2, i % 2 == 1, hidden});
      } else {
        if (i > 0) s.add(Permutation{rng.permutation(dim)});
        s.add(IafLayer{build_made_masks(dim, hidden, identity_ordering(dim), rng.next_seed()), hidden, 2.0});
      }
    }
    if (with_base) s.add(ElementwiseAffine{});
    return s;
  }

  void add(Layer l) {
    if (auto* c = std::get_if<CouplingLayer>(&l)) {
      if (c->split == 0 || c->split >= dim_)
        throw ConfigError("coupling split must satisfy 0 < k < D");
      if (c->hidden == 0) throw ConfigError("coupling hidden width must be positive");
    }
    if (auto* p = std::get_if<Permutation>(&l)) {
      if (p->perm.size() != dim_) throw ConfigError("permutation length does not match dimension");
      std::vector<char> seen(dim_, 0);
      for (auto v : p->perm) {
        if (v >= dim_ || seen[v]) throw ConfigError("permutation layer is not a permutation");
        seen[v] = 1;
      }
    }
    if (auto* f = std::get_if<IafLayer>(&l)) {
      if (f->masks.input_degrees.size() != dim_) throw ConfigError("IAF masks do not match dimension");
    }
    layers_.push_back(std::move(l));
  }

  std::size_t dim() const { return dim_; }
  const std::vector<Layer>& layers() const { return layers_; }

  /// Number of coupling or IAF layers (the elementwise base layer and
  /// permutations are not counted).
  std::size_t depth() const {
    std::size_t n = 0;
    for (const auto& l : layers_)
      if (std::holds_alternative<CouplingLayer>(l) || std::holds_alternative<IafLayer>(l)) ++n;
    return n;
  }

  bool invertible() const {
    for (const auto& l : layers_)
      if (std::holds_alternative<IafLayer>(l)) return false;
    return true;
  }

  static std::string prefix(std::size_t layer) {
    std::ostringstream os;
    os << "flow." << (layer < 10 ? "0" : "") << layer << '.';
    return os.str();
  }

  /// Initializes every parameter of the stack (overwriting existing values).
  /// Hidden layers get fan-in scaled weights; output layers of the coupling
  /// nets and MADE heads get N(0, init.scale^2) weights, so scale = 0 makes
  /// those layers exact identities. All dense layers are weight-normalized.
  void init(ParameterSet& params, Rng& rng, const FlowInit& init = {}) const {
    if (init.scale < 0) throw ConfigError("flow init scale must be >= 0");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string p = prefix(i);
      std::visit(
          [&](const auto& l) {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, ElementwiseAffine>) {
              params.set(p + "mu", Tensor(Shape{dim_}, init.mean));
              params.set(p + "log_sigma", Tensor(Shape{dim_}, init.log_sigma));
            } else if constexpr (std::is_same_v<T, CouplingLayer>) {
              const std::size_t cond = l.transform_first ? dim_ - l.split : l.split;
              const std::size_t out = dim_ - cond;
              for (const char* net : {"s.", "t."}) {
                init_dense(params, rng, p + net, "1", l.hidden, cond, std::sqrt(1.0 / cond), nullptr);
                init_dense(params, rng, p + net, "2", out, l.hidden, init.scale, nullptr);
              }
            } else if constexpr (std::is_same_v<T, IafLayer>) {
              const auto& m = l.masks;
              init_dense(params, rng, p, "h", l.hidden, dim_, -1.0, &m.input_to_hidden);
              init_dense(params, rng, p + "m.", "", dim_, l.hidden, init.scale, &m.hidden_to_output);
              init_dense(params, rng, p + "s.", "", dim_, l.hidden, init.scale, &m.hidden_to_output);
            }
          },
          layers_[i]);
    }
  }

  /// Appends the generator to `g`. `eps` must evaluate to [M, D].
  FlowOutput build(Graph& g, Var eps) const {
    FlowOutput out;
    const double half_log_2pi = 0.5 * std::log(2 * std::numbers::pi);
    out.base_log_prob = sum(square(eps), 1) * -0.5 - static_cast<double>(dim_) * half_log_2pi;
    Var x = eps;
    Var total;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string p = prefix(i);
      Var ld;
      std::visit(
          [&](const auto& l) {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, ElementwiseAffine>) {
              auto log_sigma = g.leaf(p + "log_sigma");
              x = g.leaf(p + "mu") + exp(log_sigma) * x;
              ld = sum(log_sigma);
            } else if constexpr (std::is_same_v<T, CouplingLayer>) {
              auto [pass_idx, tr_idx] = halves(l);
              auto cond = g.gather(x, pass_idx);
              auto moving = g.gather(x, tr_idx);
              auto [s, t] = coupling_nets(g, p, cond);
              auto moved = moving * exp(s) + t;
              x = g.scatter(cond, pass_idx, dim_) + g.scatter(moved, tr_idx, dim_);
              ld = sum(s, 1);
            } else if constexpr (std::is_same_v<T, IafLayer>) {
              const auto& m = l.masks;
              auto h = relu(weight_norm_dense(g, x, g.leaf(p + "vh"), g.leaf(p + "gh"), g.leaf(p + "bh"),
                                              &m.input_to_hidden));
              auto mean = weight_norm_dense(g, h, g.leaf(p + "m.v"), g.leaf(p + "m.g"), g.leaf(p + "m.b"),
                                            &m.hidden_to_output);
              auto pre = weight_norm_dense(g, h, g.leaf(p + "s.v"), g.leaf(p + "s.g"), g.leaf(p + "s.b"),
                                           &m.hidden_to_output) +
                         l.bias_init;
              auto gate = sigmoid(pre);
              x = gate * x + (1.0 - gate) * mean;
              // log sigmoid(z) = -softplus(-z)
              ld = -sum(softplus(-pre), 1);
            } else {
              x = g.gather(x, l.perm);
            }
          },
          layers_[i]);
      g.label(x, p + "out");
      out.layer_out.push_back(x);
      out.layer_logdet.push_back(ld);
      if (ld.valid()) total = total.valid() ? total + ld : ld;
    }
    out.g = x;
    out.logdet = total.valid() ? total : g.scalar(0.0);
    out.log_q = out.base_log_prob - out.logdet;
    return out;
  }

  /// Inverse map g -> eps for stacks without IAF layers. `g` is [M, D].
  Tensor inverse(const ParameterSet& params, const Tensor& g_rows) const {
    if (!invertible()) throw ConfigError("inverse is only available for stacks without IAF layers");
    Tensor y = g_rows.rank() == 1 ? g_rows.reshaped({1, g_rows.size()}) : g_rows;
    if (y.cols() != dim_) throw ShapeError("inverse input has wrong dimension");
    const std::size_t rows = y.rows();
    for (std::size_t i = layers_.size(); i-- > 0;) {
      const std::string p = prefix(i);
      std::visit(
          [&](const auto& l) {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, ElementwiseAffine>) {
              const Tensor& mu = params.get(p + "mu");
              const Tensor& ls = params.get(p + "log_sigma");
              for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < dim_; ++j) y.at(r, j) = (y.at(r, j) - mu[j]) * std::exp(-ls[j]);
            } else if constexpr (std::is_same_v<T, CouplingLayer>) {
              auto [pass_idx, tr_idx] = halves(l);
              Graph g;
              auto cond = g.gather(g.leaf("y"), pass_idx);
              auto [s, t] = coupling_nets(g, p, cond);
              g.set_output("s", s);
              g.set_output("t", t);
              auto b = params.bindings();
              b["y"] = y;
              auto ev = diff::forward(g, b, std::vector<std::string>{"s", "t"});
              const Tensor& sv = ev.value(g.output_id("s"));
              const Tensor& tv = ev.value(g.output_id("t"));
              for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < tr_idx.size(); ++j) {
                  double& v = y.at(r, tr_idx[j]);
                  v = (v - tv.at(r, j)) * std::exp(-sv.at(r, j));
                }
            } else if constexpr (std::is_same_v<T, Permutation>) {
              Tensor x(y.shape());
              for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < dim_; ++j) x.at(r, l.perm[j]) = y.at(r, j);
              y = std::move(x);
            }
          },
          layers_[i]);
    }
    return y;
  }

  json to_json() const {
    json layers = json::array();
    for (const auto& l : layers_) {
      std::visit(
          [&](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, ElementwiseAffine>) {
              layers.push_back({{"type", "affine"}});
            } else if constexpr (std::is_same_v<T, CouplingLayer>) {
              layers.push_back({{"type", "coupling"}, {"split", v.split}, {"transform_first", v.transform_first},
                                {"hidden", v.hidden}});
            } else if constexpr (std::is_same_v<T, IafLayer>) {
              layers.push_back({{"type", "iaf"}, {"hidden", v.hidden}, {"bias_init", v.bias_init},
                                {"input_degrees", v.masks.input_degrees},
                                {"hidden_degrees", v.masks.hidden_degrees}});
            } else {
              layers.push_back({{"type", "permutation"}, {"perm", v.perm}});
            }
          },
          l);
    }
    return {{"dim", dim_}, {"layers", layers}};
  }

  static FlowStack from_json(const json& j) {
    try {
      FlowStack s(j.at("dim").get<std::size_t>());
      for (const auto& l : j.at("layers")) {
        const auto type = l.at("type").get<std::string>();
        if (type == "affine") {
          s.add(ElementwiseAffine{});
        } else if (type == "coupling") {
          s.add(CouplingLayer{l.at("split").get<std::size_t>(), l.at("transform_first").get<bool>(),
                              l.at("hidden").get<std::size_t>()});
        } else if (type == "iaf") {
          IafLayer f;
          f.hidden = l.at("hidden").get<std::size_t>();
          f.bias_init = l.at("bias_init").get<double>();
          f.masks = masks_from_degrees(l.at("input_degrees").get<std::vector<std::size_t>>(),
                                       l.at("hidden_degrees").get<std::vector<std::size_t>>());
          s.add(std::move(f));
        } else if (type == "permutation") {
          s.add(Permutation{l.at("perm").get<std::vector<std::size_t>>()});
        } else {
          throw FormatError("unknown flow layer type '" + type + "'");
        }
      }
      return s;
    } catch (const json::exception& e) {
      throw FormatError(std::string("malformed flow description: ") + e.what());
    }
  }

 private:
  std::pair<std::vector<std::size_t>, std::vector<std::size_t>> halves(const CouplingLayer& l) const {
    std::vector<std::size_t> first, second;
    for (std::size_t j = 0; j < dim_; ++j) (j < l.split ? first : second).push_back(j);
    return l.transform_first ? std::pair{second, first} : std::pair{first, second};
  }

  // Scale and shift networks of a coupling layer: one hidden ReLU layer each.
  // The log-scale is squashed to (-2, 2) by 2 tanh(s/2).
  static std::pair<Var, Var> coupling_nets(Graph& g, const std::string& p, Var cond) {
    auto net = [&](const std::string& n) {
      auto h = relu(weight_norm_dense(g, cond, g.leaf(p + n + "v1"), g.leaf(p + n + "g1"), g.leaf(p + n + "b1")));
      return weight_norm_dense(g, h, g.leaf(p + n + "v2"), g.leaf(p + n + "g2"), g.leaf(p + n + "b2"));
    };
    auto s = tanh(net("s.") * 0.5) * 2.0;
    return {s, net("t.")};
  }

  // Dense layer parameters named <p>v<suffix>, <p>g<suffix>, <p>b<suffix>.
  // Directions are N(0,1); the weight-norm scale is set so the effective
  // weights equal std * direction (std < 0 selects 1/sqrt(fan-in) using the
  // mask's row count).
  static void init_dense(ParameterSet& params, Rng& rng, const std::string& p, const std::string& suffix,
                         std::size_t out, std::size_t in, double stddev, const Tensor* mask) {
    Tensor v = rng.normal_tensor({out, in});
    Tensor scale(Shape{out});
    for (std::size_t r = 0; r < out; ++r) {
      double norm2 = 0;
      std::size_t fan_in = 0;
      for (std::size_t c = 0; c < in; ++c) {
        const double mk = mask ? mask->at(r, c) : 1.0;
        norm2 += v.at(r, c) * v.at(r, c) * mk;
        fan_in += mk != 0.0;
      }
      const double sd = stddev >= 0 ? stddev : (fan_in ? std::sqrt(1.0 / static_cast<double>(fan_in)) : 0.0);
      scale[r] = sd * std::sqrt(norm2);
    }
    params.set(p + "v" + suffix, std::move(v));
    params.set(p + "g" + suffix, std::move(scale));
    params.set(p + "b" + suffix, Tensor(Shape{out}, 0.0));
  }

  static MadeMasks masks_from_degrees(std::vector<std::size_t> in_deg, std::vector<std::size_t> hid_deg) {
    MadeMasks m;
    const std::size_t d = in_deg.size(), h = hid_deg.size();
    if (d < 2 || h < 1) throw FormatError("malformed MADE degrees");
    m.input_degrees = std::move(in_deg);
    m.hidden_degrees = std::move(hid_deg);
    m.input_to_hidden = Tensor(Shape{h, d});
    m.hidden_to_output = Tensor(Shape{d, h});
    for (std::size_t k = 0; k < h; ++k)
      for (std::size_t j = 0; j < d; ++j)
        m.input_to_hidden.at(k, j) = m.hidden_degrees[k] >= m.input_degrees[j] ? 1.0 : 0.0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t k = 0; k < h; ++k)
        m.hidden_to_output.at(i, k) = m.input_degrees[i] > m.hidden_degrees[k] ? 1.0 : 0.0;
    return m;
  }

  std::size_t dim_ = 0;
  std::vector<Layer> layers_;
};

/// Prebuilt sampling graph for a stack; reusable across parameter updates.
class FlowSampler {
 public:
  explicit FlowSampler(const FlowStack& stack) : dim_(stack.dim()) {
    out_ = stack.build(graph_, graph_.leaf("eps"));
    graph_.set_output("g", out_.g);
    graph_.set_output("log_q", out_.log_q);
    for (std::size_t i = 0; i < out_.layer_out.size(); ++i) {
      graph_.set_output("layer" + std::to_string(i), out_.layer_out[i]);
      if (out_.layer_logdet[i].valid()) graph_.set_output("logdet" + std::to_string(i), out_.layer_logdet[i]);
    }
  }

  /// Samples for each row of eps ([M, D] or [D]). Non-finite layer outputs
  /// raise NumericalError naming the first offending layer.
  std::vector<PosteriorSample> sample(const ParameterSet& params, const Tensor& eps) const {
    Tensor rows = eps.rank() == 1 ? eps.reshaped({1, eps.size()}) : eps;
    if (rows.cols() != dim_)
      throw ShapeError("noise has dimension " + std::to_string(rows.cols()) + ", flow expects " +
                       std::to_string(dim_));
    auto b = params.bindings();
    b["eps"] = rows;
    std::vector<std::uint32_t> targets{graph_.output_id("g"), graph_.output_id("log_q")};
    for (std::size_t i = 0; i < out_.layer_out.size(); ++i) {
      targets.push_back(out_.layer_out[i].id());
      if (out_.layer_logdet[i].valid()) targets.push_back(out_.layer_logdet[i].id());
    }
    auto ev = diff::forward(graph_, b, targets);
    for (std::size_t i = 0; i < out_.layer_out.size(); ++i) {
      const bool bad = !ev.value(out_.layer_out[i]).all_finite() ||
                       (out_.layer_logdet[i].valid() && !ev.value(out_.layer_logdet[i]).all_finite());
      if (bad) throw NumericalError("flow layer " + std::to_string(i) + " produced a non-finite value");
    }
    const Tensor& g = ev.value(out_.g);
    const Tensor& lq = ev.value(out_.log_q);
    std::vector<PosteriorSample> out;
    for (std::size_t r = 0; r < rows.rows(); ++r) {
      PosteriorSample s;
      s.g = Tensor(Shape{dim_}, std::vector<double>(g.data() + r * dim_, g.data() + (r + 1) * dim_));
      s.epsilon = Tensor(Shape{dim_}, std::vector<double>(rows.data() + r * dim_, rows.data() + (r + 1) * dim_));
      s.log_q = lq.size() == 1 ? lq[0] : lq[r];
      out.push_back(std::move(s));
    }
    return out;
  }

  /// g for every row of eps as one [M, D] tensor.
  Tensor sample_matrix(const ParameterSet& params, const Tensor& eps) const {
    auto b = params.bindings();
    b["eps"] = eps;
    return diff::evaluate(graph_, b, "g");
  }

 private:
  std::size_t dim_;
  Graph graph_;
  FlowOutput out_;
};

inline PosteriorSample sample(const FlowStack& stack, const ParameterSet& params, const Tensor& eps) {
  return FlowSampler(stack).sample(params, eps).front();
}

/// Applies the small-weight initialization; returns the stack for chaining.
inline const FlowStack& init_small(const FlowStack& stack, ParameterSet& params, Rng& rng, double scale,
                                   double mean = 0.0, double log_sigma = 0.0) {
  if (!(scale >= 0)) throw ConfigError("init scale must be non-negative");
  stack.init(params, rng, FlowInit{scale, mean, log_sigma});
  return stack;
}

}  // namespace bhn::flows
