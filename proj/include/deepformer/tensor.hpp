#pragma once

#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "deepformer/errors.hpp"

namespace deepformer {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major n-d array. The only value type that flows through the
// network; immutable once produced by a tape op.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), T(0)) {
    check_extents();
  }

  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    check_extents();
    if (data.size() != shape_numel(shape)) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_string(shape));
    }
  }

  static Tensor full(Shape s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  size_t numel() const { return data.size(); }
  size_t ndim() const { return shape.size(); }
  size_t extent(size_t axis) const { return shape.at(axis); }

  // extent of the last axis; 1 for a scalar
  size_t last_dim() const { return shape.empty() ? 1 : shape.back(); }

  // number of rows when viewed as [rows, last_dim]
  size_t rows() const { return shape.empty() ? 1 : numel() / shape.back(); }

  T& operator[](size_t i) { return data[i]; }
  const T& operator[](size_t i) const { return data[i]; }

  T& at2(size_t i, size_t j) { return data[i * shape.back() + j]; }
  const T& at2(size_t i, size_t j) const { return data[i * shape.back() + j]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

 private:
  void check_extents() const {
    for (size_t d : shape) {
      if (d == 0) throw ShapeError("zero extent in shape " + shape_string(shape));
    }
  }
};

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_diff: shapes " + shape_string(a.shape) + " vs " +
                     shape_string(b.shape));
  }
  double m = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) {
    double d = std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]));
    if (d > m) m = d;
  }
  return m;
}

}  // namespace deepformer
