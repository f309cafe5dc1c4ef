// Dense row-major tensor. Storage precision is single for the model path;
// the same code instantiates with double for wide-precision gradient checks.
#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "ctxdet/common.hpp"

namespace ctxdet {

template <typename T>
struct TensorT {
  std::vector<int> shape;
  std::vector<T> data;

  TensorT() = default;
  explicit TensorT(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), fill);
  }
  TensorT(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    CTXDET_CHECK(static_cast<int64_t>(data.size()) == numel_of(shape),
                 "tensor data does not match shape");
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int e : s) {
      CTXDET_CHECK(e > 0, "tensor extents must be positive");
      n *= e;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  T& at(int i, int j) { return data[static_cast<size_t>(i) * dim(1) + j]; }
  const T& at(int i, int j) const { return data[static_cast<size_t>(i) * dim(1) + j]; }
  T& at(int i, int j, int k) {
    return data[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
  }
  const T& at(int i, int j, int k) const {
    return data[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
  }
  T& at(int i, int j, int k, int l) {
    return data[((static_cast<size_t>(i) * dim(1) + j) * dim(2) + k) * dim(3) + l];
  }
  const T& at(int i, int j, int k, int l) const {
    return data[((static_cast<size_t>(i) * dim(1) + j) * dim(2) + k) * dim(3) + l];
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using Tensor = TensorT<float>;

template <typename T>
std::string shape_str(const TensorT<T>& t) {
  std::string s = "[";
  for (int i = 0; i < t.ndim(); ++i) s += (i ? "x" : "") + std::to_string(t.dim(i));
  return s + "]";
}

template <typename T>
TensorT<T> random_normal(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
  TensorT<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <typename T>
uint32_t tensor_crc32(const TensorT<T>& t, uint32_t seed = 0) {
  uint32_t c = crc32_bytes(t.shape.data(), t.shape.size() * sizeof(int), seed);
  return crc32_bytes(t.data.data(), t.data.size() * sizeof(T), c);
}

}  // namespace ctxdet
