#pragma once

#include <map>
#include <string>
#include <vector>

#include "bhn/error.hpp"
#include "bhn/graph.hpp"
#include "bhn/tensor.hpp"

namespace bhn {

/// Named trainable tensors. Ordered by name so iteration (and therefore
/// optimizer updates and serialization) is deterministic.
class ParameterSet {
 public:
  void set(const std::string& name, Tensor t) { tensors_[name] = std::move(t); }

  const Tensor& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw BindingError("no parameter named '" + name + "'");
    return it->second;
  }
  Tensor& get(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw BindingError("no parameter named '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  std::size_t size() const { return tensors_.size(); }

  std::vector<std::string> names(const std::string& prefix = "") const {
    std::vector<std::string> out;
    for (const auto& [k, _] : tensors_)
      if (k.compare(0, prefix.size(), prefix) == 0) out.push_back(k);
    return out;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
  }

  void bind(diff::Bindings& b) const {
    for (const auto& [k, t] : tensors_) b[k] = t;
  }
  diff::Bindings bindings() const {
    diff::Bindings b;
    bind(b);
    return b;
  }

  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }

  bool operator==(const ParameterSet& o) const { return tensors_ == o.tensors_; }

 private:
  std::map<std::string, Tensor> tensors_;
};

/// Weight-normalized dense layer on a graph: (x . (v/|v|_row)^T) * scale + bias,
/// with v of shape [out, in], scale and bias of shape [out]. `mask` (optional
/// constant of v's shape) zeroes connections; rows left with no connection
/// produce bias only.
inline diff::Var weight_norm_dense(diff::Graph& g, diff::Var x, diff::Var v, diff::Var scale, diff::Var bias,
                                   const Tensor* mask = nullptr) {
  diff::Var dir = v;
  diff::Var norm;
  if (mask) {
    dir = v * g.constant(*mask);
    Tensor empty_rows(Shape{mask->rows(), 1}, 0.0);
    for (std::size_t r = 0; r < mask->rows(); ++r) {
      bool any = false;
      for (std::size_t c = 0; c < mask->cols(); ++c) any = any || mask->at(r, c) != 0.0;
      empty_rows[r] = any ? 0.0 : 1.0;
    }
    norm = g.l2norm(dir, 1) + g.constant(empty_rows);
  } else {
    norm = g.l2norm(dir, 1);
  }
  auto unit = dir / norm;
  return matmul(x, transpose(unit)) * scale + bias;
}

}  // namespace bhn
