#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include "cimlite/rng.hpp"

namespace cimlite {

// Dense NCHW tensor of doubles, rank 1-4.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int e : s) {
      if (e <= 0) throw std::invalid_argument("tensor extent must be positive");
      n *= e;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int> s, double v) {
    Tensor t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }

  static Tensor from(std::vector<int> s, std::vector<double> values) {
    Tensor t;
    t.shape = std::move(s);
    if (static_cast<int64_t>(values.size()) != numel_of(t.shape))
      throw std::invalid_argument("tensor data length does not match shape");
    t.data = std::move(values);
    return t;
  }

  static Tensor randn(std::vector<int> s, Rng& rng, double sd = 1.0) {
    Tensor t(std::move(s));
    for (auto& x : t.data) x = rng.normal(0.0, sd);
    return t;
  }

  static Tensor rand_uniform(std::vector<int> s, Rng& rng, double lo, double hi) {
    Tensor t(std::move(s));
    for (auto& x : t.data) x = rng.uniform(lo, hi);
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  double& at(int i) { return data[static_cast<size_t>(i)]; }
  double at(int i) const { return data[static_cast<size_t>(i)]; }
  double& at(int i, int j) { return data[static_cast<size_t>(i) * dim(1) + j]; }
  double at(int i, int j) const { return data[static_cast<size_t>(i) * dim(1) + j]; }
  double& at(int c, int h, int w) {
    return data[(static_cast<size_t>(c) * dim(1) + h) * dim(2) + w];
  }
  double at(int c, int h, int w) const {
    return data[(static_cast<size_t>(c) * dim(1) + h) * dim(2) + w];
  }
  double& at(int n, int c, int h, int w) {
    return data[((static_cast<size_t>(n) * dim(1) + c) * dim(2) + h) * dim(3) + w];
  }
  double at(int n, int c, int h, int w) const {
    return data[((static_cast<size_t>(n) * dim(1) + c) * dim(2) + h) * dim(3) + w];
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double abs_max() const {
    double m = 0.0;
    for (double v : data) m = std::max(m, std::fabs(v));
    return m;
  }

  double sum() const {
    double s = 0.0;
    for (double v : data) s += v;
    return s;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace cimlite
