#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <vector>

#include "weightflow/errors.hpp"

namespace wf {

// Dense row-major f64 tensor. Only rank 1-3 is used in practice; most code
// treats a Tensor as a matrix [rows x cols] or a flat vector.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::initializer_list<std::size_t> s) : shape(s) { data.assign(numel(), 0.0); }
  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) { data.assign(numel(), 0.0); }
  Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel() != data.size()) throw dimension_error("tensor: shape/data size mismatch");
  }

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  static Tensor row(std::vector<double> d) {
    std::size_t n = d.size();
    return Tensor({1, n}, std::move(d));
  }
  static Tensor vec(std::vector<double> d) {
    std::size_t n = d.size();
    return Tensor({n}, std::move(d));
  }
};

// C[m x n] += A[m x k] * B[k x n], row-major. i-k-j order keeps B accesses
// sequential; good enough for the matrix sizes in this project.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m x n] += A[m x k] * B^T where B is [n x k].
inline void gemm_bt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// C[m x n] += A^T * B where A is [k x m], B is [k x n].
inline void gemm_at_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace wf
