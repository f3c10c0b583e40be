#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace gmlfm {

/// Row-major dense matrix of doubles. Sized for k x k factor matrices and
/// n x k embedding tables.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// out = A v
inline void matvec(const Matrix& a, std::span<const double> v, std::span<double> out) {
  for (std::size_t r = 0; r < a.rows(); ++r) out[r] = dot(a.row(r), v);
}

inline std::vector<double> matvec(const Matrix& a, std::span<const double> v) {
  std::vector<double> out(a.rows());
  matvec(a, v, out);
  return out;
}

/// out = A^T v
inline std::vector<double> matvec_transposed(const Matrix& a, std::span<const double> v) {
  std::vector<double> out(a.cols(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double vr = v[r];
    const auto row = a.row(r);
    for (std::size_t c = 0; c < a.cols(); ++c) out[c] += row[c] * vr;
  }
  return out;
}

/// A^T A
inline Matrix gram(const Matrix& a) {
  Matrix m(a.cols(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto row = a.row(r);
    for (std::size_t i = 0; i < a.cols(); ++i)
      for (std::size_t j = 0; j < a.cols(); ++j) m(i, j) += row[i] * row[j];
  }
  return m;
}

/// x^T M x
inline double quadratic_form(const Matrix& m, std::span<const double> x) {
  double s = 0.0;
  for (std::size_t r = 0; r < m.rows(); ++r) s += x[r] * dot(m.row(r), x);
  return s;
}

/// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x))
      comp_ += (sum_ - t) + x;
    else
      comp_ += (x - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

}  // namespace gmlfm
