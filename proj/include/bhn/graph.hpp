#pragma once

// Reverse-mode differentiation over a static expression graph.
//
// A Graph is built once from named leaves, constants and primitives, then
// evaluated any number of times against a set of bindings (leaf name ->
// Tensor). Building appends nodes, so every node's inputs precede it and the
// node vector is already a valid tape order. Evaluation never mutates the
// graph; concurrent evaluations with distinct bindings are safe.
//
// Tensors are viewed as rank-2 (scalar = 1x1, vector [n] = 1xn) for
// broadcasting: two operands are compatible when every extent matches or is 1.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "bhn/error.hpp"
#include "bhn/tensor.hpp"

namespace bhn::diff {

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Affine,  // p0 * x + p1
  Exp,
  Log,
  Tanh,
  Sigmoid,
  Relu,
  Softplus,
  Square,
  Sqrt,
  Sign,
  Clip,
  Sum,
  SumAxis,
  Mean,
  L2NormAxis,
  MatMul,
  Transpose,
  Softmax,
  Gather,
  Scatter,
  GatherRows,
  Pick,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "subtract";
    case Op::Mul: return "multiply";
    case Op::Div: return "divide";
    case Op::Neg: return "negate";
    case Op::Affine: return "affine";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Relu: return "relu";
    case Op::Softplus: return "softplus";
    case Op::Square: return "square";
    case Op::Sqrt: return "sqrt";
    case Op::Sign: return "sign";
    case Op::Clip: return "clip";
    case Op::Sum: return "sum";
    case Op::SumAxis: return "sum_axis";
    case Op::Mean: return "mean";
    case Op::L2NormAxis: return "l2norm_axis";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Softmax: return "softmax";
    case Op::Gather: return "gather";
    case Op::Scatter: return "scatter";
    case Op::GatherRows: return "gather_rows";
    case Op::Pick: return "pick";
  }
  return "?";
}

struct Node {
  Op op = Op::Leaf;
  std::uint32_t a = 0, b = 0;
  int arity = 0;
  std::string name;  // leaf name, or optional label for diagnostics
  double p0 = 0.0, p1 = 0.0;
  int axis = 0;
  std::vector<std::size_t> index;
  std::size_t width = 0;
  std::shared_ptr<const Tensor> constant;
};

class Graph;

/// Handle to a node while a graph is being built. Invalidated if the graph
/// is moved.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::uint32_t id) : g_(g), id_(id) {}
  std::uint32_t id() const { return id_; }
  Graph* graph() const { return g_; }
  bool valid() const { return g_ != nullptr; }

 private:
  Graph* g_ = nullptr;
  std::uint32_t id_ = 0;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  /// Named input. Requesting an existing name returns the same node.
  Var leaf(const std::string& name) {
    if (auto it = leaves_.find(name); it != leaves_.end()) return {this, it->second};
    Node n;
    n.op = Op::Leaf;
    n.name = name;
    const auto id = push(std::move(n));
    leaves_.emplace(name, id);
    return {this, id};
  }

  Var constant(Tensor t) {
    Node n;
    n.op = Op::Constant;
    n.constant = std::make_shared<const Tensor>(std::move(t));
    return {this, push(std::move(n))};
  }
  Var scalar(double v) { return constant(Tensor::scalar(v)); }

  Var add(Var x, Var y) { return binary(Op::Add, x, y); }
  Var sub(Var x, Var y) { return binary(Op::Sub, x, y); }
  Var mul(Var x, Var y) { return binary(Op::Mul, x, y); }
  Var div(Var x, Var y) { return binary(Op::Div, x, y); }
  Var neg(Var x) { return unary(Op::Neg, x); }
  /// scale * x + shift with constant scale/shift.
  Var affine(Var x, double scale, double shift) {
    Node n = make(Op::Affine, x);
    n.p0 = scale;
    n.p1 = shift;
    return {this, push(std::move(n))};
  }
  Var exp(Var x) { return unary(Op::Exp, x); }
  Var log(Var x) { return unary(Op::Log, x); }
  Var tanh(Var x) { return unary(Op::Tanh, x); }
  Var sigmoid(Var x) { return unary(Op::Sigmoid, x); }
  Var relu(Var x) { return unary(Op::Relu, x); }
  Var softplus(Var x) { return unary(Op::Softplus, x); }
  Var square(Var x) { return unary(Op::Square, x); }
  Var sqrt(Var x) { return unary(Op::Sqrt, x); }
  /// Forward sign(x); gradient is zero everywhere.
  Var sign(Var x) { return unary(Op::Sign, x); }
  /// Clamp into [lo, hi]; gradient passes only strictly inside (lo, hi).
  Var clip(Var x, double lo, double hi) {
    Node n = make(Op::Clip, x);
    n.p0 = lo;
    n.p1 = hi;
    return {this, push(std::move(n))};
  }
  Var sum(Var x) { return unary(Op::Sum, x); }
  Var mean(Var x) { return unary(Op::Mean, x); }
  /// Sum along axis of the rank-2 view; result keeps the reduced axis as 1.
  Var sum(Var x, int axis) { return axis_op(Op::SumAxis, x, axis); }
  Var l2norm(Var x, int axis) { return axis_op(Op::L2NormAxis, x, axis); }
  Var matmul(Var x, Var y) { return binary(Op::MatMul, x, y); }
  Var transpose(Var x) { return unary(Op::Transpose, x); }
  /// Row-wise softmax.
  Var softmax(Var x) { return unary(Op::Softmax, x); }
  /// Select columns (last axis).
  Var gather(Var x, std::vector<std::size_t> cols) {
    Node n = make(Op::Gather, x);
    n.index = std::move(cols);
    return {this, push(std::move(n))};
  }
  /// Place columns of x at `cols` in a zero matrix of `width` columns.
  Var scatter(Var x, std::vector<std::size_t> cols, std::size_t width) {
    Node n = make(Op::Scatter, x);
    n.index = std::move(cols);
    n.width = width;
    return {this, push(std::move(n))};
  }
  /// Rows of x selected by the integer-valued tensor `rows`.
  Var gather_rows(Var x, Var rows) { return binary(Op::GatherRows, x, rows); }
  /// out[r] = x[r, cols[r]] as an [R,1] column.
  Var pick(Var x, Var cols) { return binary(Op::Pick, x, cols); }

  void set_output(const std::string& name, Var v) { outputs_[name] = v.id(); }
  Var output(const std::string& name) {
    auto it = outputs_.find(name);
    if (it == outputs_.end()) throw BindingError("graph has no output named '" + name + "'");
    return {this, it->second};
  }
  std::uint32_t output_id(const std::string& name) const {
    auto it = outputs_.find(name);
    if (it == outputs_.end()) throw BindingError("graph has no output named '" + name + "'");
    return it->second;
  }
  bool has_output(const std::string& name) const { return outputs_.count(name) != 0; }

  /// Diagnostic label used in error messages; leaves keep their names.
  void label(Var v, std::string text) {
    if (nodes_[v.id()].op != Op::Leaf) nodes_[v.id()].name = std::move(text);
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  std::optional<std::uint32_t> find_leaf(const std::string& name) const {
    auto it = leaves_.find(name);
    if (it == leaves_.end()) return std::nullopt;
    return it->second;
  }
  const std::map<std::string, std::uint32_t>& leaves() const { return leaves_; }

 private:
  Node make(Op op, Var x) {
    own(x);
    Node n;
    n.op = op;
    n.a = x.id();
    n.arity = 1;
    return n;
  }
  Var unary(Op op, Var x) { return {this, push(make(op, x))}; }
  Var binary(Op op, Var x, Var y) {
    own(x);
    own(y);
    Node n;
    n.op = op;
    n.a = x.id();
    n.b = y.id();
    n.arity = 2;
    return {this, push(std::move(n))};
  }
  Var axis_op(Op op, Var x, int axis) {
    if (axis != 0 && axis != 1) throw ShapeError("axis must be 0 or 1");
    Node n = make(op, x);
    n.axis = axis;
    return {this, push(std::move(n))};
  }
  void own(Var v) const {
    if (v.graph() != this) throw BindingError("variable belongs to a different graph");
  }
  std::uint32_t push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<std::uint32_t>(nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::map<std::string, std::uint32_t> leaves_;
  std::map<std::string, std::uint32_t> outputs_;
};

// Expression sugar.
inline Var operator+(Var x, Var y) { return x.graph()->add(x, y); }
inline Var operator-(Var x, Var y) { return x.graph()->sub(x, y); }
inline Var operator*(Var x, Var y) { return x.graph()->mul(x, y); }
inline Var operator/(Var x, Var y) { return x.graph()->div(x, y); }
inline Var operator-(Var x) { return x.graph()->neg(x); }
inline Var operator+(Var x, double c) { return x.graph()->affine(x, 1.0, c); }
inline Var operator+(double c, Var x) { return x.graph()->affine(x, 1.0, c); }
inline Var operator-(Var x, double c) { return x.graph()->affine(x, 1.0, -c); }
inline Var operator-(double c, Var x) { return x.graph()->affine(x, -1.0, c); }
inline Var operator*(Var x, double c) { return x.graph()->affine(x, c, 0.0); }
inline Var operator*(double c, Var x) { return x.graph()->affine(x, c, 0.0); }
inline Var exp(Var x) { return x.graph()->exp(x); }
inline Var log(Var x) { return x.graph()->log(x); }
inline Var tanh(Var x) { return x.graph()->tanh(x); }
inline Var sigmoid(Var x) { return x.graph()->sigmoid(x); }
inline Var relu(Var x) { return x.graph()->relu(x); }
inline Var softplus(Var x) { return x.graph()->softplus(x); }
inline Var square(Var x) { return x.graph()->square(x); }
inline Var sum(Var x) { return x.graph()->sum(x); }
inline Var sum(Var x, int axis) { return x.graph()->sum(x, axis); }
inline Var mean(Var x) { return x.graph()->mean(x); }
inline Var matmul(Var x, Var y) { return x.graph()->matmul(x, y); }
inline Var transpose(Var x) { return x.graph()->transpose(x); }

using Bindings = std::unordered_map<std::string, Tensor>;

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline std::string where(const std::vector<Node>& nodes, std::uint32_t id) {
  const Node& n = nodes[id];
  std::string s = "node #" + std::to_string(id) + " (" + op_name(n.op);
  if (!n.name.empty()) s += " '" + n.name + "'";
  return s + ")";
}

inline Shape broadcast_shape(const Tensor& x, const Tensor& y, const std::vector<Node>& nodes,
                             std::uint32_t id) {
  const std::size_t xr = x.rows(), xc = x.cols(), yr = y.rows(), yc = y.cols();
  auto ok = [](std::size_t p, std::size_t q) { return p == q || p == 1 || q == 1; };
  if (!ok(xr, yr) || !ok(xc, yc))
    throw ShapeError(where(nodes, id) + ": cannot broadcast " + shape_str(x.shape()) + " with " +
                     shape_str(y.shape()));
  const std::size_t r = std::max(xr, yr), c = std::max(xc, yc);
  const std::size_t rank = std::max(x.rank(), y.rank());
  if (rank == 2 || r > 1) return {r, c};
  if (rank == 1) return {c};
  return {};
}

inline std::size_t as_index(double v, std::size_t limit, const std::vector<Node>& nodes,
                            std::uint32_t id) {
  if (!(v >= 0) || v != std::floor(v) || static_cast<std::size_t>(v) >= limit)
    throw ShapeError(where(nodes, id) + ": index " + std::to_string(v) + " out of range [0," +
                     std::to_string(limit) + ")");
  return static_cast<std::size_t>(v);
}

// Generic broadcast loop: f(out_idx, x_idx, y_idx).
template <class F>
void broadcast_each(const Shape& out, const Tensor& x, const Tensor& y, F&& f) {
  const std::size_t r = out.size() == 2 ? out[0] : 1;
  const std::size_t c = out.empty() ? 1 : out.back();
  const std::size_t xr = x.rows(), xc = x.cols(), yr = y.rows(), yc = y.cols();
  if (xr == yr && xc == yc) {
    const std::size_t n = r * c;
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t xi = (xr == 1 ? 0 : i) * xc, yi = (yr == 1 ? 0 : i) * yc;
    for (std::size_t j = 0; j < c; ++j)
      f(i * c + j, xi + (xc == 1 ? 0 : j), yi + (yc == 1 ? 0 : j));
  }
}

}  // namespace detail

struct Gradients;

/// Values of every node needed for one output, in tape order.
class Evaluation {
 public:
  const Tensor& value(std::uint32_t id) const {
    if (id >= values_.size() || !computed_[id])
      throw BindingError("node #" + std::to_string(id) + " was not evaluated");
    return values_[id];
  }
  const Tensor& value(Var v) const { return value(v.id()); }
  bool computed(std::uint32_t id) const { return id < computed_.size() && computed_[id]; }

 private:
  friend Evaluation forward(const Graph&, const Bindings&, const std::vector<std::uint32_t>&);
  friend Gradients value_and_gradient(const Graph&, const Bindings&, std::uint32_t,
                                      const std::vector<std::string>&);
  std::vector<Tensor> values_;
  std::vector<char> computed_;
};

/// Forward pass computing every ancestor of `targets`.
inline Evaluation forward(const Graph& graph, const Bindings& bindings,
                          const std::vector<std::uint32_t>& targets) {
  using namespace detail;
  const auto& nodes = graph.nodes();
  const std::size_t n = nodes.size();
  std::vector<char> needed(n, 0);
  for (auto t : targets) {
    if (t >= n) throw BindingError("target node out of range");
    needed[t] = 1;
  }
  for (std::size_t k = n; k-- > 0;) {
    if (!needed[k]) continue;
    const Node& nd = nodes[k];
    if (nd.arity >= 1) needed[nd.a] = 1;
    if (nd.arity >= 2) needed[nd.b] = 1;
  }

  Evaluation ev;
  ev.values_.resize(n);
  ev.computed_.assign(n, 0);
  auto& val = ev.values_;

  for (std::uint32_t k = 0; k < n; ++k) {
    if (!needed[k]) continue;
    const Node& nd = nodes[k];
    auto unary_map = [&](auto f) {
      const Tensor& x = val[nd.a];
      Tensor out(x.shape());
      const double* xp = x.data();
      double* o = out.data();
      for (std::size_t i = 0; i < x.size(); ++i) o[i] = f(xp[i]);
      return out;
    };
    switch (nd.op) {
      case Op::Leaf: {
        auto it = bindings.find(nd.name);
        if (it == bindings.end()) throw BindingError("unbound leaf '" + nd.name + "'");
        val[k] = it->second;
        break;
      }
      case Op::Constant:
        val[k] = *nd.constant;
        break;
      case Op::Add:
      case Op::Sub:
      case Op::Mul:
      case Op::Div: {
        const Tensor& x = val[nd.a];
        const Tensor& y = val[nd.b];
        Tensor out(broadcast_shape(x, y, nodes, k));
        const double* xp = x.data();
        const double* yp = y.data();
        double* o = out.data();
        switch (nd.op) {
          case Op::Add: broadcast_each(out.shape(), x, y, [&](auto i, auto p, auto q) { o[i] = xp[p] + yp[q]; }); break;
          case Op::Sub: broadcast_each(out.shape(), x, y, [&](auto i, auto p, auto q) { o[i] = xp[p] - yp[q]; }); break;
          case Op::Mul: broadcast_each(out.shape(), x, y, [&](auto i, auto p, auto q) { o[i] = xp[p] * yp[q]; }); break;
          default: broadcast_each(out.shape(), x, y, [&](auto i, auto p, auto q) { o[i] = xp[p] / yp[q]; }); break;
        }
        val[k] = std::move(out);
        break;
      }
      case Op::Neg: val[k] = unary_map([](double v) { return -v; }); break;
      case Op::Affine: {
        const double s = nd.p0, t = nd.p1;
        val[k] = unary_map([s, t](double v) { return s * v + t; });
        break;
      }
      case Op::Exp: val[k] = unary_map([](double v) { return std::exp(v); }); break;
      case Op::Log: val[k] = unary_map([](double v) { return std::log(v); }); break;
      case Op::Tanh: val[k] = unary_map([](double v) { return std::tanh(v); }); break;
      case Op::Sigmoid: val[k] = unary_map([](double v) { return detail::sigmoid(v); }); break;
      case Op::Relu: val[k] = unary_map([](double v) { return v > 0 ? v : 0.0; }); break;
      case Op::Softplus: val[k] = unary_map([](double v) { return detail::softplus(v); }); break;
      case Op::Square: val[k] = unary_map([](double v) { return v * v; }); break;
      case Op::Sqrt: val[k] = unary_map([](double v) { return std::sqrt(v); }); break;
      case Op::Sign: val[k] = unary_map([](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }); break;
      case Op::Clip: {
        const double lo = nd.p0, hi = nd.p1;
        val[k] = unary_map([lo, hi](double v) { return std::min(hi, std::max(lo, v)); });
        break;
      }
      case Op::Sum:
      case Op::Mean: {
        const Tensor& x = val[nd.a];
        double s = 0.0;
        for (double v : x.values()) s += v;
        if (nd.op == Op::Mean) s /= static_cast<double>(x.size());
        val[k] = Tensor::scalar(s);
        break;
      }
      case Op::SumAxis:
      case Op::L2NormAxis: {
        const Tensor& x = val[nd.a];
        const std::size_t r = x.rows(), c = x.cols();
        const bool sq = nd.op == Op::L2NormAxis;
        Tensor out(nd.axis == 0 ? Shape{1, c} : Shape{r, 1});
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double v = x.data()[i * c + j];
            out.data()[nd.axis == 0 ? j : i] += sq ? v * v : v;
          }
        if (sq)
          for (auto& v : out.storage()) v = std::sqrt(v);
        val[k] = std::move(out);
        break;
      }
      case Op::MatMul: {
        const Tensor& x = val[nd.a];
        const Tensor& y = val[nd.b];
        if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.rows())
          throw ShapeError(where(nodes, k) + ": cannot multiply " + shape_str(x.shape()) + " by " +
                           shape_str(y.shape()));
        Tensor out(Shape{x.rows(), y.cols()});
        MMap(out.data(), x.rows(), y.cols()).noalias() =
            CMap(x.data(), x.rows(), x.cols()) * CMap(y.data(), y.rows(), y.cols());
        val[k] = std::move(out);
        break;
      }
      case Op::Transpose: {
        const Tensor& x = val[nd.a];
        const std::size_t r = x.rows(), c = x.cols();
        Tensor out(Shape{c, r});
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) out.data()[j * r + i] = x.data()[i * c + j];
        val[k] = std::move(out);
        break;
      }
      case Op::Softmax: {
        const Tensor& x = val[nd.a];
        const std::size_t r = x.rows(), c = x.cols();
        Tensor out(x.shape());
        for (std::size_t i = 0; i < r; ++i) {
          const double* xi = x.data() + i * c;
          double* oi = out.data() + i * c;
          const double mx = *std::max_element(xi, xi + c);
          double z = 0.0;
          for (std::size_t j = 0; j < c; ++j) z += (oi[j] = std::exp(xi[j] - mx));
          for (std::size_t j = 0; j < c; ++j) oi[j] /= z;
        }
        val[k] = std::move(out);
        break;
      }
      case Op::Gather: {
        const Tensor& x = val[nd.a];
        const std::size_t r = x.rows(), c = x.cols(), w = nd.index.size();
        for (auto j : nd.index)
          if (j >= c) throw ShapeError(where(nodes, k) + ": column " + std::to_string(j) + " out of range");
        Tensor out(x.rank() == 2 ? Shape{r, w} : Shape{w});
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) out.data()[i * w + j] = x.data()[i * c + nd.index[j]];
        val[k] = std::move(out);
        break;
      }
      case Op::Scatter: {
        const Tensor& x = val[nd.a];
        const std::size_t r = x.rows(), c = x.cols(), w = nd.width;
        if (c != nd.index.size())
          throw ShapeError(where(nodes, k) + ": scatter of " + std::to_string(c) + " columns into " +
                           std::to_string(nd.index.size()) + " slots");
        Tensor out(x.rank() == 2 ? Shape{r, w} : Shape{w});
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) out.data()[i * w + nd.index[j]] = x.data()[i * c + j];
        val[k] = std::move(out);
        break;
      }
      case Op::GatherRows: {
        const Tensor& x = val[nd.a];
        const Tensor& idx = val[nd.b];
        const std::size_t c = x.cols(), m = idx.size();
        Tensor out(Shape{m, c});
        for (std::size_t i = 0; i < m; ++i) {
          const std::size_t r = as_index(idx[i], x.rows(), nodes, k);
          std::copy_n(x.data() + r * c, c, out.data() + i * c);
        }
        val[k] = std::move(out);
        break;
      }
      case Op::Pick: {
        const Tensor& x = val[nd.a];
        const Tensor& idx = val[nd.b];
        const std::size_t r = x.rows(), c = x.cols();
        if (idx.size() != r)
          throw ShapeError(where(nodes, k) + ": " + std::to_string(idx.size()) + " indices for " +
                           std::to_string(r) + " rows");
        Tensor out(Shape{r, 1});
        for (std::size_t i = 0; i < r; ++i) out.data()[i] = x.data()[i * c + as_index(idx[i], c, nodes, k)];
        val[k] = std::move(out);
        break;
      }
    }
    ev.computed_[k] = 1;
  }
  return ev;
}

inline Evaluation forward(const Graph& graph, const Bindings& bindings, const std::vector<std::string>& outputs) {
  std::vector<std::uint32_t> ids;
  for (const auto& o : outputs) ids.push_back(graph.output_id(o));
  return forward(graph, bindings, ids);
}

/// Forward value of a named output.
inline Tensor evaluate(const Graph& graph, const Bindings& bindings, const std::string& output = "out") {
  const auto id = graph.output_id(output);
  return forward(graph, bindings, std::vector<std::uint32_t>{id}).value(id);
}

/// Forward values together with the gradients of one scalar output.
struct Gradients {
  Evaluation values;
  std::map<std::string, Tensor> wrt;
};

/// d(output)/d(leaf) for each requested leaf name, plus every forward value
/// computed on the way. The output must be scalar.
inline Gradients value_and_gradient(const Graph& graph, const Bindings& bindings, std::uint32_t output,
                                    const std::vector<std::string>& wrt) {
  using namespace detail;
  const auto& nodes = graph.nodes();
  for (const auto& name : wrt) {
    auto leaf = graph.find_leaf(name);
    if (!leaf) throw BindingError("'" + name + "' is not a leaf of this graph");
  }
  Evaluation ev = forward(graph, bindings, std::vector<std::uint32_t>{output});
  const auto& val = ev.values_;
  if (val[output].size() != 1)
    throw ShapeError("gradient requires a scalar output, got " + shape_str(val[output].shape()));

  const std::size_t n = nodes.size();
  // Only nodes downstream of a requested leaf receive gradient.
  std::vector<char> req(n, 0);
  for (const auto& name : wrt) req[*graph.find_leaf(name)] = 1;
  for (std::size_t k = 0; k < n; ++k) {
    const Node& nd = nodes[k];
    if (nd.op == Op::GatherRows || nd.op == Op::Pick)
      req[k] = req[nd.a];
    else if (nd.arity >= 1)
      req[k] = req[nd.a] || (nd.arity == 2 && req[nd.b]);
  }
  std::vector<Tensor> grad(n);
  std::vector<char> has(n, 0);
  auto acc = [&](std::uint32_t id) -> Tensor& {
    if (!has[id]) {
      grad[id] = Tensor(val[id].shape(), 0.0);
      has[id] = 1;
    }
    return grad[id];
  };
  acc(output)[0] = 1.0;

  for (std::size_t kk = output + 1; kk-- > 0;) {
    const auto k = static_cast<std::uint32_t>(kk);
    if (!has[k] || !ev.computed_[k] || !req[k]) continue;
    const Node& nd = nodes[k];
    if (nd.arity == 1 && !req[nd.a]) continue;
    if ((nd.op == Op::GatherRows || nd.op == Op::Pick) && !req[nd.a]) continue;
    const Tensor& g = grad[k];
    const Tensor& y = val[k];
    const double* gp = g.data();
    auto unary_back = [&](auto dfdx) {
      const Tensor& x = val[nd.a];
      Tensor& gx = acc(nd.a);
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += gp[i] * dfdx(x[i], y[i]);
    };
    switch (nd.op) {
      case Op::Leaf:
      case Op::Constant:
        break;
      case Op::Add:
      case Op::Sub:
      case Op::Mul:
      case Op::Div: {
        const Tensor& x = val[nd.a];
        const Tensor& z = val[nd.b];
        const double* xp = x.data();
        const double* zp = z.data();
        const bool want_x = req[nd.a];
        const bool want_z = req[nd.b];
        Tensor dummy;
        Tensor& gx = want_x ? acc(nd.a) : dummy;
        Tensor& gz = want_z ? acc(nd.b) : dummy;
        double* gxp = gx.data();
        double* gzp = gz.data();
        const Op op = nd.op;
        broadcast_each(y.shape(), x, z, [&](auto i, auto p, auto q) {
          switch (op) {
            case Op::Add:
              if (want_x) gxp[p] += gp[i];
              if (want_z) gzp[q] += gp[i];
              break;
            case Op::Sub:
              if (want_x) gxp[p] += gp[i];
              if (want_z) gzp[q] -= gp[i];
              break;
            case Op::Mul:
              if (want_x) gxp[p] += gp[i] * zp[q];
              if (want_z) gzp[q] += gp[i] * xp[p];
              break;
            default:
              if (want_x) gxp[p] += gp[i] / zp[q];
              if (want_z) gzp[q] -= gp[i] * xp[p] / (zp[q] * zp[q]);
              break;
          }
        });
        break;
      }
      case Op::Neg: unary_back([](double, double) { return -1.0; }); break;
      case Op::Affine: {
        const double s = nd.p0;
        unary_back([s](double, double) { return s; });
        break;
      }
      case Op::Exp: unary_back([](double, double fy) { return fy; }); break;
      case Op::Log: unary_back([](double x, double) { return 1.0 / x; }); break;
      case Op::Tanh: unary_back([](double, double fy) { return 1.0 - fy * fy; }); break;
      case Op::Sigmoid: unary_back([](double, double fy) { return fy * (1.0 - fy); }); break;
      case Op::Relu: unary_back([](double x, double) { return x > 0 ? 1.0 : 0.0; }); break;
      case Op::Softplus: unary_back([](double x, double) { return detail::sigmoid(x); }); break;
      case Op::Square: unary_back([](double x, double) { return 2.0 * x; }); break;
      case Op::Sqrt: unary_back([](double, double fy) { return fy > 0 ? 0.5 / fy : 0.0; }); break;
      case Op::Sign: break;
      case Op::Clip: {
        const double lo = nd.p0, hi = nd.p1;
        unary_back([lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
        break;
      }
      case Op::Sum:
      case Op::Mean: {
        Tensor& gx = acc(nd.a);
        const double d = nd.op == Op::Mean ? gp[0] / static_cast<double>(gx.size()) : gp[0];
        for (auto& v : gx.storage()) v += d;
        break;
      }
      case Op::SumAxis:
      case Op::L2NormAxis: {
        const Tensor& x = val[nd.a];
        Tensor& gx = acc(nd.a);
        const std::size_t r = x.rows(), c = x.cols();
        const bool norm = nd.op == Op::L2NormAxis;
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t o = nd.axis == 0 ? j : i;
            double d = gp[o];
            if (norm) d = y[o] > 0 ? d * x[i * c + j] / y[o] : 0.0;
            gx[i * c + j] += d;
          }
        break;
      }
      case Op::MatMul: {
        const Tensor& x = val[nd.a];
        const Tensor& z = val[nd.b];
        CMap gm(g.data(), g.rows(), g.cols());
        if (req[nd.a]) {
          Tensor& gx = acc(nd.a);
          MMap(gx.data(), x.rows(), x.cols()).noalias() += gm * CMap(z.data(), z.rows(), z.cols()).transpose();
        }
        if (req[nd.b]) {
          Tensor& gz = acc(nd.b);
          MMap(gz.data(), z.rows(), z.cols()).noalias() += CMap(x.data(), x.rows(), x.cols()).transpose() * gm;
        }
        break;
      }
      case Op::Transpose: {
        Tensor& gx = acc(nd.a);
        const std::size_t r = gx.rows(), c = gx.cols();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += gp[j * r + i];
        break;
      }
      case Op::Softmax: {
        Tensor& gx = acc(nd.a);
        const std::size_t r = y.rows(), c = y.cols();
        for (std::size_t i = 0; i < r; ++i) {
          const double* yi = y.data() + i * c;
          const double* gi = gp + i * c;
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += gi[j] * yi[j];
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += yi[j] * (gi[j] - dot);
        }
        break;
      }
      case Op::Gather: {
        Tensor& gx = acc(nd.a);
        const std::size_t r = gx.rows(), c = gx.cols(), w = nd.index.size();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) gx[i * c + nd.index[j]] += gp[i * w + j];
        break;
      }
      case Op::Scatter: {
        Tensor& gx = acc(nd.a);
        const std::size_t r = gx.rows(), c = gx.cols(), w = nd.width;
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += gp[i * w + nd.index[j]];
        break;
      }
      case Op::GatherRows: {
        Tensor& gx = acc(nd.a);
        const Tensor& idx = val[nd.b];
        const std::size_t c = gx.cols();
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const auto r = static_cast<std::size_t>(idx[i]);
          for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += gp[i * c + j];
        }
        break;
      }
      case Op::Pick: {
        Tensor& gx = acc(nd.a);
        const Tensor& idx = val[nd.b];
        const std::size_t c = gx.cols();
        for (std::size_t i = 0; i < idx.size(); ++i) gx[i * c + static_cast<std::size_t>(idx[i])] += gp[i];
        break;
      }
    }
  }

  std::map<std::string, Tensor> result;
  for (const auto& name : wrt) {
    const auto id = *graph.find_leaf(name);
    if (has[id]) {
      result.emplace(name, std::move(grad[id]));
    } else {
      auto it = bindings.find(name);
      if (it == bindings.end()) throw BindingError("unbound leaf '" + name + "'");
      result.emplace(name, Tensor(it->second.shape(), 0.0));
    }
  }
  return {std::move(ev), std::move(result)};
}

/// d(output)/d(leaf) for each requested leaf name. The output must be scalar.
inline std::map<std::string, Tensor> gradient(const Graph& graph, const Bindings& bindings, std::uint32_t output,
                                              const std::vector<std::string>& wrt) {
  return value_and_gradient(graph, bindings, output, wrt).wrt;
}

inline std::map<std::string, Tensor> gradient(const Graph& graph, const Bindings& bindings, const std::string& output,
                                              const std::vector<std::string>& wrt) {
  return gradient(graph, bindings, graph.output_id(output), wrt);
}

}  // namespace bhn::diff
