#include "absentia/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace absentia {

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw std::invalid_argument("negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(Eigen::ArrayXd::Constant(shape_numel(shape_), fill)) {}

Tensor::Tensor(Shape shape, Eigen::ArrayXd data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size())
    throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str(shape_));
}

Tensor::Tensor(Shape shape, std::initializer_list<double> values) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != static_cast<Index>(values.size()))
    throw std::invalid_argument("initializer length does not match shape " + shape_str(shape_));
  data_.resize(static_cast<Index>(values.size()));
  Index i = 0;
  for (double v : values) data_[i++] = v;
}

double Tensor::item() const {
  if (data_.size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel())
    throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

Tensor slice_batch(const Tensor& batch, Index i) {
  if (batch.rank() < 1 || i < 0 || i >= batch.dim(0))
    throw std::invalid_argument("batch index out of range");
  Shape inner(batch.shape().begin() + 1, batch.shape().end());
  const Index n = shape_numel(inner);
  return Tensor(inner, batch.data().segment(i * n, n));
}

Tensor stack(const std::vector<Tensor>& items) {
  if (items.empty()) throw std::invalid_argument("stack of zero tensors");
  const Shape& inner = items.front().shape();
  const Index n = items.front().numel();
  Shape out{static_cast<Index>(items.size())};
  out.insert(out.end(), inner.begin(), inner.end());
  Eigen::ArrayXd data(n * static_cast<Index>(items.size()));
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != inner) throw std::invalid_argument("stack of mismatched shapes");
    data.segment(static_cast<Index>(i) * n, n) = items[i].data();
  }
  return Tensor(out, std::move(data));
}

}  // namespace absentia
