#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "segkd/errors.hpp"

namespace segkd {

/// Dense row-major tensor of rank <= 4. Activations use NCHW layout;
/// scalars are rank-1 tensors of size 1.
template <typename T>
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> s, T fill = T(0)) : shape(std::move(s)) {
    data.assign(static_cast<std::size_t>(count(shape)), fill);
  }

  static Tensor zeros(std::vector<std::int64_t> s) { return Tensor(std::move(s), T(0)); }
  static Tensor ones(std::vector<std::int64_t> s) { return Tensor(std::move(s), T(1)); }

  static Tensor scalar(T v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
  }

  static std::int64_t count(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  std::int64_t dim(int i) const {
    return i < rank() ? shape[static_cast<std::size_t>(i)] : 1;
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  // NCHW accessors.
  T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data[static_cast<std::size_t>(((n * dim(1) + c) * dim(2) + h) * dim(3) + w)];
  }
  const T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data[static_cast<std::size_t>(((n * dim(1) + c) * dim(2) + h) * dim(3) + w)];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  T min() const { return *std::min_element(data.begin(), data.end()); }
  T max() const { return *std::max_element(data.begin(), data.end()); }

  T sum() const {
    T acc = T(0);
    for (const T& v : data) acc += v;
    return acc;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

inline std::string shape_str(const std::vector<std::int64_t>& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace segkd
