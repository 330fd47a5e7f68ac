#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vintk/error.hpp"

namespace vintk {

/// Storage for every numeric buffer. Eigen picks vectorized code paths by
/// pointer alignment, so a fixed alignment keeps results bit-identical
/// across allocations and threads.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline std::string shape_string(std::span<const std::size_t> shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major tensor of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(count(shape_), fill);
  }
  Tensor(std::vector<std::size_t> shape, Buffer data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != count(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static std::size_t count(std::span<const std::size_t> shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  Buffer& values() { return data_; }
  const Buffer& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Same buffer, new extents with equal element count.
  Tensor reshaped(std::vector<std::size_t> shape) const {
    return Tensor(std::move(shape), data_);
  }

  /// View the buffer as a matrix with `cols` columns.
  MatMap as_matrix(std::size_t cols) {
    return MatMap(data_.data(), static_cast<Eigen::Index>(data_.size() / cols),
                  static_cast<Eigen::Index>(cols));
  }
  ConstMatMap as_matrix(std::size_t cols) const {
    return ConstMatMap(data_.data(), static_cast<Eigen::Index>(data_.size() / cols),
                       static_cast<Eigen::Index>(cols));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_extents() const {
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
    }
  }

  std::vector<std::size_t> shape_;
  Buffer data_;
};

/// Square or rectangular dense matrix used for Gram matrices, bases and
/// linear solves. Row-major.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, Buffer data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) throw ShapeError("matrix data length mismatch");
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix from_eigen(const RowMatrix& e) {
    Matrix m(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
    MatMap(m.data_.data(), e.rows(), e.cols()) = e;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool square() const { return rows_ == cols_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  MatMap eigen() {
    return MatMap(data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_));
  }
  ConstMatMap eigen() const {
    return ConstMatMap(data_.data(), static_cast<Eigen::Index>(rows_),
                       static_cast<Eigen::Index>(cols_));
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  double frobenius() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
  }

  double trace() const {
    double s = 0.0;
    for (std::size_t i = 0; i < std::min(rows_, cols_); ++i) s += (*this)(i, i);
    return s;
  }

  /// Largest |m(i,j) - m(j,i)|.
  double asymmetry() const {
    double worst = 0.0;
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = i + 1; j < cols_; ++j)
        worst = std::max(worst, std::abs((*this)(i, j) - (*this)(j, i)));
    return worst;
  }

  void symmetrize() {
    if (!square()) throw ShapeError("symmetrize needs a square matrix");
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = i + 1; j < cols_; ++j) {
        double v = 0.5 * ((*this)(i, j) + (*this)(j, i));
        (*this)(i, j) = v;
        (*this)(j, i) = v;
      }
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Buffer data_;
};

inline Matrix operator*(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matrix product dimension mismatch");
  RowMatrix p = a.eigen() * b.eigen();
  return Matrix::from_eigen(p);
}

/// One named slice of a flat parameter buffer.
struct ParamSegment {
  std::string name;
  std::size_t offset = 0;
  std::vector<std::size_t> shape;

  std::size_t size() const { return Tensor::count(shape); }
  friend bool operator==(const ParamSegment&, const ParamSegment&) = default;
};

/// Ordered, disjoint, gap-free list of parameter segments.
class ParamLayout {
 public:
  ParamLayout() = default;

  std::size_t add(std::string name, std::vector<std::size_t> shape) {
    ParamSegment seg{std::move(name), total_, std::move(shape)};
    total_ += seg.size();
    index_[seg.name] = segments_.size();
    segments_.push_back(std::move(seg));
    return segments_.back().offset;
  }

  std::size_t total() const { return total_; }
  const std::vector<ParamSegment>& segments() const { return segments_; }

  const ParamSegment& segment(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ShapeError("no parameter segment named '" + name + "'");
    return segments_[it->second];
  }

  friend bool operator==(const ParamLayout& a, const ParamLayout& b) {
    return a.total_ == b.total_ && a.segments_ == b.segments_;
  }

 private:
  std::size_t total_ = 0;
  std::vector<ParamSegment> segments_;
  std::map<std::string, std::size_t> index_;
};

/// Flat parameter buffer plus the layout that names its pieces.
struct ParamVector {
  ParamLayout layout;
  Buffer values;

  std::span<const double> segment(const std::string& name) const {
    const auto& s = layout.segment(name);
    return std::span<const double>(values).subspan(s.offset, s.size());
  }
  std::span<double> segment(const std::string& name) {
    const auto& s = layout.segment(name);
    return std::span<double>(values).subspan(s.offset, s.size());
  }
  std::size_t size() const { return values.size(); }
};

/// Gradient aligned to a ParamVector layout.
struct GradVector {
  Buffer values;

  std::size_t size() const { return values.size(); }
  double dot(const GradVector& other) const {
    if (other.size() != size()) throw ShapeError("gradient length mismatch in dot product");
    return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(size()))
        .dot(Eigen::Map<const Eigen::VectorXd>(other.values.data(),
                                               static_cast<Eigen::Index>(size())));
  }
};

}  // namespace vintk
