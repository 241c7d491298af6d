#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace iqt {

// Dense row-major tensor with a small dynamic shape. Scalar type is a
// template parameter so the network can run in f32 for training and f64
// for finite-difference verification.
template <class T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    v.assign(numel_of(shape), T(0));
  }
  Tensor(std::vector<int> s, std::vector<T> data)
      : shape(std::move(s)), v(std::move(data)) {
    if ((std::int64_t)v.size() != numel_of(shape))
      throw std::invalid_argument("tensor data size does not match shape");
  }

  static std::int64_t numel_of(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("negative tensor dim");
      n *= d;
    }
    return n;
  }

  std::int64_t numel() const { return (std::int64_t)v.size(); }
  T* data() { return v.data(); }
  const T* data() const { return v.data(); }
  T& operator[](std::int64_t i) { return v[(size_t)i]; }
  const T& operator[](std::int64_t i) const { return v[(size_t)i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (size_t i = 0; i < v.size(); ++i) out.v[i] = (U)v[i];
    return out;
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string r = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + ")";
}

}  // namespace iqt
