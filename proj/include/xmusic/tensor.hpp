#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace xmusic {

// Dense row-major matrix of doubles. 1 x n and n x 1 tensors double as vectors.
struct Tensor2 {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Tensor2() = default;

  Tensor2(int r, int c) : rows(r), cols(c) {
    if (r < 0 || c < 0) {
      throw std::invalid_argument("Tensor2: negative shape");
    }
    data.assign(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), 0.0);
  }

  Tensor2(int r, int c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (r < 0 || c < 0) {
      throw std::invalid_argument("Tensor2: negative shape");
    }
    if (data.size() != static_cast<std::size_t>(r) * static_cast<std::size_t>(c)) {
      throw std::invalid_argument("Tensor2: data length does not match rows*cols");
    }
  }

  static Tensor2 zeros(int r, int c) { return Tensor2(r, c); }

  static Tensor2 full(int r, int c, double v) {
    Tensor2 t(r, c);
    for (double& x : t.data) x = v;
    return t;
  }

  static Tensor2 identity(int n) {
    Tensor2 t(n, n);
    for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  static Tensor2 row_vector(std::vector<double> values) {
    const int n = static_cast<int>(values.size());
    return Tensor2(1, n, std::move(values));
  }

  std::size_t size() const { return data.size(); }

  double& at(int r, int c) {
    return data[static_cast<std::size_t>(r) * cols + static_cast<std::size_t>(c)];
  }
  double at(int r, int c) const {
    return data[static_cast<std::size_t>(r) * cols + static_cast<std::size_t>(c)];
  }

  double* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const {
    return data.data() + static_cast<std::size_t>(r) * cols;
  }

  bool same_shape(const Tensor2& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void fill(double v) {
    for (double& x : data) x = v;
  }

  std::string shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }
};

// A named trainable tensor. grad has the same shape as value and is zeroed
// between optimizer steps; backward passes accumulate into it.
struct Parameter {
  std::string name;
  Tensor2 value;
  Tensor2 grad;

  Parameter() = default;
  Parameter(std::string n, Tensor2 v)
      : name(std::move(n)), value(std::move(v)),
        grad(Tensor2::zeros(value.rows, value.cols)) {}

  void zero_grad() { grad.fill(0.0); }
  std::size_t size() const { return value.size(); }
};

inline void check_same_shape(const Tensor2& a, const Tensor2& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
  }
}

}  // namespace xmusic
