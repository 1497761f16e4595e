#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace cvtrace {

using Vector = std::vector<double>;

// Dense row-major matrix of doubles.
class Matrix {
public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<double const> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  std::vector<double> const& data() const { return data_; }

  bool all_finite() const {
    for (double x : data_)
      if (!std::isfinite(x))
        return false;
    return true;
  }

  void fill(double value) { std::fill(data_.begin(), data_.end(), value); }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c)
        t(c, r) = (*this)(r, c);
    return t;
  }

  friend bool operator==(Matrix const&, Matrix const&) = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<double const> a, std::span<double const> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += a[i] * b[i];
  return s;
}

// y = M x
inline void matvec(Matrix const& m, std::span<double const> x, std::span<double> y) {
  for (std::size_t r = 0; r < m.rows(); ++r)
    y[r] = dot(m.row(r), x);
}

// y += M^T x
inline void matvec_t_add(Matrix const& m, std::span<double const> x, std::span<double> y) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double const xr = x[r];
    if (xr == 0.0)
      continue;
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c)
      y[c] += xr * row[c];
  }
}

// M += a b^T
inline void add_outer(Matrix& m, std::span<double const> a, std::span<double const> b) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double const ar = a[r];
    if (ar == 0.0)
      continue;
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c)
      row[c] += ar * b[c];
  }
}

inline double norm2(std::span<double const> v) { return std::sqrt(dot(v, v)); }

} // namespace cvtrace
