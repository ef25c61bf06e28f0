#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lorta/error.hpp"

namespace lorta {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMajorMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixView = Eigen::Map<RowMajorMatrix>;
using ConstMatrixView = Eigen::Map<const RowMajorMatrix>;

using Shape = std::vector<std::size_t>;

inline std::string shape_string(std::span<const std::size_t> shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

inline std::size_t shape_volume(std::span<const std::size_t> shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

// N-way real array, row-major (last index varies fastest).
class DenseTensor {
 public:
  DenseTensor() = default;

  explicit DenseTensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_volume(shape_), fill);
  }

  DenseTensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_volume(shape_)) {
      throw ShapeError("DenseTensor: data length " +
                       std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  // Copies a matrix into a 2-way tensor.
  static DenseTensor from_matrix(const Matrix& m) {
    DenseTensor t({static_cast<std::size_t>(m.rows()),
                   static_cast<std::size_t>(m.cols())});
    t.as_matrix() = m;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t order() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t extent(std::size_t mode) const { return shape_.at(mode); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  std::size_t offset(std::span<const std::size_t> idx) const {
    if (idx.size() != shape_.size()) {
      throw IndexError("DenseTensor: index of order " +
                       std::to_string(idx.size()) + " for tensor of shape " +
                       shape_string(shape_));
    }
    std::size_t off = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] >= shape_[k]) {
        throw IndexError("DenseTensor: index " + std::to_string(idx[k]) +
                         " out of range for mode " + std::to_string(k) +
                         " of shape " + shape_string(shape_));
      }
      off = off * shape_[k] + idx[k];
    }
    return off;
  }

  double& at(std::span<const std::size_t> idx) { return data_[offset(idx)]; }
  double at(std::span<const std::size_t> idx) const {
    return data_[offset(idx)];
  }
  double& at(std::initializer_list<std::size_t> idx) {
    return at(std::span<const std::size_t>(idx.begin(), idx.size()));
  }
  double at(std::initializer_list<std::size_t> idx) const {
    return at(std::span<const std::size_t>(idx.begin(), idx.size()));
  }

  // Row-major view of a 2-way tensor.
  MatrixView as_matrix() {
    require_order(2);
    return MatrixView(data_.data(), static_cast<Eigen::Index>(shape_[0]),
                      static_cast<Eigen::Index>(shape_[1]));
  }
  ConstMatrixView as_matrix() const {
    require_order(2);
    return ConstMatrixView(data_.data(), static_cast<Eigen::Index>(shape_[0]),
                           static_cast<Eigen::Index>(shape_[1]));
  }

  // Row-major view of the trailing two modes at a fixed leading position.
  // `lead` is the flat index over all modes except the last two.
  MatrixView block(std::size_t lead) {
    auto [rows, cols] = trailing_dims();
    check_lead(lead, rows * cols);
    return MatrixView(data_.data() + lead * rows * cols,
                      static_cast<Eigen::Index>(rows),
                      static_cast<Eigen::Index>(cols));
  }
  ConstMatrixView block(std::size_t lead) const {
    auto [rows, cols] = trailing_dims();
    check_lead(lead, rows * cols);
    return ConstMatrixView(data_.data() + lead * rows * cols,
                           static_cast<Eigen::Index>(rows),
                           static_cast<Eigen::Index>(cols));
  }

  void reshape(Shape shape) {
    if (shape_volume(shape) != data_.size()) {
      throw ShapeError("DenseTensor: cannot reshape " + shape_string(shape_) +
                       " to " + shape_string(shape));
    }
    shape_ = std::move(shape);
    validate_shape();
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
  }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  DenseTensor& operator+=(const DenseTensor& o) {
    require_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  DenseTensor& operator-=(const DenseTensor& o) {
    require_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  DenseTensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend DenseTensor operator+(DenseTensor a, const DenseTensor& b) {
    return a += b;
  }
  friend DenseTensor operator-(DenseTensor a, const DenseTensor& b) {
    return a -= b;
  }
  friend DenseTensor operator*(double s, DenseTensor a) { return a *= s; }

  bool operator==(const DenseTensor& o) const = default;

 private:
  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("DenseTensor: empty shape");
    for (std::size_t e : shape_) {
      if (e == 0) {
        throw ShapeError("DenseTensor: zero extent in shape " +
                         shape_string(shape_));
      }
    }
  }
  void require_order(std::size_t n) const {
    if (shape_.size() != n) {
      throw ShapeError("DenseTensor: expected order " + std::to_string(n) +
                       ", got shape " + shape_string(shape_));
    }
  }
  void require_same_shape(const DenseTensor& o) const {
    if (shape_ != o.shape_) {
      throw ShapeError("DenseTensor: shape mismatch " + shape_string(shape_) +
                       " vs " + shape_string(o.shape_));
    }
  }
  std::pair<std::size_t, std::size_t> trailing_dims() const {
    if (shape_.size() < 2) throw ShapeError("DenseTensor: order < 2");
    return {shape_[shape_.size() - 2], shape_[shape_.size() - 1]};
  }
  void check_lead(std::size_t lead, std::size_t block_size) const {
    if ((lead + 1) * block_size > data_.size()) {
      throw IndexError("DenseTensor: block " + std::to_string(lead) +
                       " out of range for shape " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const DenseTensor& a, const DenseTensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: shape mismatch " +
                     shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  }
  return m;
}

}  // namespace lorta
