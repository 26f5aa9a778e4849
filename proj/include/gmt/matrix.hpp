#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gmt/error.hpp"

namespace gmt {

using Real = double;

using EigenMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EigenMap = Eigen::Map<EigenMatrix>;
using ConstEigenMap = Eigen::Map<const EigenMatrix>;

// Dense row-major matrix. Vectors are 1×n matrices, scalars 1×1.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, Real fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<Real> data);

  static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }
  static Matrix identity(std::size_t n);
  static Matrix scalar(Real v) { return Matrix(1, 1, v); }
  static Matrix from_rows(std::initializer_list<std::initializer_list<Real>> rows);
  static Matrix row_vector(std::span<const Real> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool same_shape(const Matrix& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }

  Real& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  Real operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  std::span<Real> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const Real> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<Real> values() { return data_; }
  std::span<const Real> values() const { return data_; }
  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }

  /// Value of a 1×1 matrix.
  Real item() const;

  EigenMap eigen() { return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)}; }
  ConstEigenMap eigen() const {
    return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
  }

  bool all_finite() const;
  void fill(Real v);
  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(Real s);

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  std::string shape_string() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, Real s);

Matrix transpose(const Matrix& m);
Real max_abs_diff(const Matrix& a, const Matrix& b);
Real frobenius_norm(const Matrix& m);

}  // namespace gmt
