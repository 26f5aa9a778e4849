#include "gmt/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace gmt {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<Real> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ConfigurationError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                             std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<Real>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  Matrix m(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw ConfigurationError("ragged initializer for Matrix");
    std::size_t j = 0;
    for (Real v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

Matrix Matrix::row_vector(std::span<const Real> values) {
  return Matrix(1, values.size(), std::vector<Real>(values.begin(), values.end()));
}

Real Matrix::item() const {
  if (size() != 1) throw ConfigurationError("item() on a " + shape_string() + " matrix");
  return data_[0];
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
}

void Matrix::fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

Matrix& Matrix::operator+=(const Matrix& other) {
  if (!same_shape(other)) throw ConfigurationError("shape mismatch in +=: " + shape_string() + " vs " + other.shape_string());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  if (!same_shape(other)) throw ConfigurationError("shape mismatch in -=: " + shape_string() + " vs " + other.shape_string());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(Real s) {
  for (Real& v : data_) v *= s;
  return *this;
}

std::string Matrix::shape_string() const {
  std::ostringstream os;
  os << rows_ << "x" << cols_;
  return os.str();
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, Real s) { return a *= s; }

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

Real max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ConfigurationError("shape mismatch in max_abs_diff");
  Real worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

Real frobenius_norm(const Matrix& m) {
  Real s = 0.0;
  for (Real v : m.values()) s += v * v;
  return std::sqrt(s);
}

}  // namespace gmt
