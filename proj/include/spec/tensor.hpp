#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace spec::nn {

// Dense row-major tensor of doubles. Shape conventions used by the layers:
//   dense input  [batch, features]
//   conv input   [batch, channels, length]
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(numel_of(shape), 0.0) {}
  Tensor(std::vector<int> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
    if (v.size() != numel_of(shape)) throw std::invalid_argument("tensor: shape/data mismatch");
  }

  static size_t numel_of(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("tensor: negative dimension");
      n *= static_cast<size_t>(d);
    }
    return n;
  }

  size_t numel() const { return v.size(); }
  int dim(size_t i) const { return shape.at(i); }

  double* data() { return v.data(); }
  const double* data() const { return v.data(); }

  double& operator[](size_t i) { return v[i]; }
  double operator[](size_t i) const { return v[i]; }

  void fill(double x) { std::fill(v.begin(), v.end(), x); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

}  // namespace spec::nn
