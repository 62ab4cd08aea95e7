// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "grainrec/error.hpp"

namespace grainrec {

/// Dense row-major matrix. Row vectors are 1 x n, column vectors n x 1.
template <class Real>
class Matrix {
 public:
  using value_type = Real;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, Real fill = Real(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<Real> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                           " does not match " + shape_string(rows_, cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<Real>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = Real(1);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  Real& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  Real operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  std::span<Real> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const Real> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Real* data() noexcept { return data_.data(); }
  const Real* data() const noexcept { return data_.data(); }
  std::vector<Real>& storage() noexcept { return data_; }
  const std::vector<Real>& storage() const noexcept { return data_; }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }
  void set_zero() { fill(Real(0)); }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape() const { return shape_string(rows_, cols_); }

  Matrix& operator+=(const Matrix& o) {
    require_same_shape(*this, o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  template <class Other>
  Matrix<Other> cast() const {
    Matrix<Other> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<Other>(data_[i]);
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
  }

  Real squared_norm() const {
    Real s = 0;
    for (Real v : data_) s += v * v;
    return s;
  }

  bool operator==(const Matrix& o) const = default;

  static std::string shape_string(std::size_t r, std::size_t c) {
    std::ostringstream os;
    os << '(' << r << 'x' << c << ')';
    return os.str();
  }

  static void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (!a.same_shape(b)) {
      throw DimensionError(std::string(what) + ": shape mismatch " + a.shape() + " vs " + b.shape());
    }
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

namespace kernel {

// C += A * B
template <class Real>
void gemm_nn_acc(const Matrix<Real>& a, const Matrix<Real>& b, Matrix<Real>& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    Real* crow = c.data() + i * m;
    const Real* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      if (av == Real(0)) continue;
      const Real* brow = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A * B^T
template <class Real>
void gemm_nt_acc(const Matrix<Real>& a, const Matrix<Real>& b, Matrix<Real>& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  for (std::size_t i = 0; i < n; ++i) {
    const Real* arow = a.data() + i * k;
    Real* crow = c.data() + i * m;
    for (std::size_t j = 0; j < m; ++j) {
      const Real* brow = b.data() + j * k;
      Real s = 0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}

// C += A^T * B
template <class Real>
void gemm_tn_acc(const Matrix<Real>& a, const Matrix<Real>& b, Matrix<Real>& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const Real* arow = a.data() + i * k;
    const Real* brow = b.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      if (av == Real(0)) continue;
      Real* crow = c.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class Real>
Real sigmoid(Real x) {
  if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

template <class Real>
Real dot(std::span<const Real> a, std::span<const Real> b) {
  Real s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace kernel

template <class Real>
Matrix<Real> matmul(const Matrix<Real>& a, const Matrix<Real>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + a.shape() + " * " + b.shape());
  }
  Matrix<Real> c(a.rows(), b.cols());
  kernel::gemm_nn_acc(a, b, c);
  return c;
}

/// Seeded generator with a portable real-number mapping, so identical seeds
/// give identical streams regardless of the standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = ~std::uint64_t(0) - (~std::uint64_t(0) % n);
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

  Rng split() { return Rng(engine_() ^ 0x9E3779B97F4A7C15ULL); }

 private:
  std::mt19937_64 engine_;
};

template <class Real>
Matrix<Real> random_uniform(std::size_t rows, std::size_t cols, double lo, double hi, Rng& rng) {
  Matrix<Real> m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<Real>(rng.uniform(lo, hi));
  return m;
}

}  // namespace grainrec
