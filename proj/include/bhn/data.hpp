#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "bhn/error.hpp"
#include "bhn/tensor.hpp"

namespace bhn {

/// Row-major examples with one target per row. For classification the
/// target is the class index stored as a double; `classes` is 0 for
/// regression. Unlike Tensor, a Dataset may be empty.
struct Dataset {
  std::size_t dim = 0;
  std::size_t classes = 0;
  std::vector<double> x;
  std::vector<double> y;

  Dataset() = default;
  Dataset(std::size_t d, std::size_t c) : dim(d), classes(c) {}

  std::size_t size() const { return y.size(); }
  bool empty() const { return y.empty(); }

  void add(const double* row, double target) {
    x.insert(x.end(), row, row + dim);
    y.push_back(target);
  }
  void add(const std::vector<double>& row, double target) {
    if (row.size() != dim) throw DataError("example has width " + std::to_string(row.size()) + ", expected " +
                                           std::to_string(dim));
    add(row.data(), target);
  }

  const double* row(std::size_t i) const { return x.data() + i * dim; }
  std::size_t label(std::size_t i) const { return static_cast<std::size_t>(y[i]); }

  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset d(dim, classes);
    d.x.reserve(idx.size() * dim);
    d.y.reserve(idx.size());
    for (auto i : idx) {
      if (i >= size()) throw DataError("example index out of range");
      d.add(row(i), y[i]);
    }
    return d;
  }

  /// Inputs of the selected rows as [n, dim]; `idx` must be non-empty.
  Tensor inputs(const std::vector<std::size_t>& idx) const {
    Tensor t(Shape{idx.size(), dim});
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < dim; ++c) t.at(r, c) = row(idx[r])[c];
    return t;
  }
  Tensor targets(const std::vector<std::size_t>& idx) const {
    Tensor t(Shape{idx.size(), 1});
    for (std::size_t r = 0; r < idx.size(); ++r) t[r] = y[idx[r]];
    return t;
  }
  Tensor inputs() const { return inputs(all()); }
  Tensor targets() const { return targets(all()); }

  std::vector<std::size_t> all() const {
    std::vector<std::size_t> v(size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
    return v;
  }

  void validate() const {
    if (dim == 0) throw DataError("dataset has zero input width");
    if (x.size() != y.size() * dim) throw DataError("dataset inputs and targets disagree in length");
    for (double v : x)
      if (!std::isfinite(v)) throw DataError("dataset contains a non-finite input");
    for (double v : y) {
      if (!std::isfinite(v)) throw DataError("dataset contains a non-finite target");
      if (classes && (v < 0 || v >= static_cast<double>(classes) || v != static_cast<double>(static_cast<std::size_t>(v))))
        throw DataError("label " + std::to_string(v) + " is not a class index below " + std::to_string(classes));
    }
  }
};

}  // namespace bhn
