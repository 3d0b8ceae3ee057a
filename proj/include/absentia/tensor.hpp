#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace absentia {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

Index shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. A rank-0 shape holds one scalar.
class Tensor {
 public:
  Tensor() : Tensor(Shape{0}) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, Eigen::ArrayXd data);
  Tensor(Shape shape, std::initializer_list<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{}, v); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }
  static Tensor ones_like(const Tensor& t) { return Tensor(t.shape(), 1.0); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index numel() const { return data_.size(); }
  bool is_scalar() const { return data_.size() == 1 && shape_.size() <= 1; }

  Eigen::ArrayXd& data() { return data_; }
  const Eigen::ArrayXd& data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](Index i) { return data_[i]; }
  double operator[](Index i) const { return data_[i]; }

  // 4-D accessor (n, c, h, w); also serves 3-D (c, h, w) via at3.
  double& at(Index n, Index c, Index h, Index w) { return data_[offset4(n, c, h, w)]; }
  double at(Index n, Index c, Index h, Index w) const { return data_[offset4(n, c, h, w)]; }
  double& at3(Index c, Index h, Index w) { return data_[(c * shape_[1] + h) * shape_[2] + w]; }
  double at3(Index c, Index h, Index w) const { return data_[(c * shape_[1] + h) * shape_[2] + w]; }

  /// Value of a single-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;
  bool all_finite() const { return data_.isFinite().all(); }
  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && (data_ == other.data_).all();
  }

 private:
  Index offset4(Index n, Index c, Index h, Index w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  Eigen::ArrayXd data_;
};

/// Copies sample `i` (leading axis) out of a batch tensor.
Tensor slice_batch(const Tensor& batch, Index i);
/// Concatenates equally-shaped tensors along a new leading axis.
Tensor stack(const std::vector<Tensor>& items);

}  // namespace absentia
