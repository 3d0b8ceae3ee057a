#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// Every backward rule is written in terms of the differentiable operations
// below, so a backward pass run with `create_graph` produces gradients that
// are themselves graph nodes and can be differentiated again.

#include "absentia/tensor.hpp"

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace absentia {

class Var;

namespace detail {

using BackwardFn = std::function<std::vector<Var>(const Var& grad_output)>;

struct Node {
  Tensor value;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<Var> inputs;
  BackwardFn backward;
};

}  // namespace detail

/// Handle to a node of the computation graph (cheap to copy).
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  static Var constant(Tensor value) { return Var(std::move(value), false); }
  static Var param(Tensor value) { return Var(std::move(value), true); }

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const char* op() const { return node_->op; }
  double item() const { return node_->value.item(); }

  /// Same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

  const detail::Node* node() const { return node_.get(); }

 private:
  friend Var make_result(Tensor, std::vector<Var>, detail::BackwardFn, const char*);
  std::shared_ptr<detail::Node> node_;
};

/// Records an operation result. The backward closure receives the output
/// gradient and returns one gradient per input (an undefined Var = none).
Var make_result(Tensor value, std::vector<Var> inputs, detail::BackwardFn backward, const char* op);

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Sets graph recording on the current thread for its lifetime.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

struct BackwardOptions {
  bool create_graph = false;
  // When false, a requested node that the root does not depend on is an error.
  bool allow_unused = false;
};

/// Gradients of a scalar `root` with respect to each of `wrt` (same order).
std::vector<Var> grad(const Var& root, std::span<const Var> wrt, BackwardOptions options = {});
Var grad(const Var& root, const Var& wrt, BackwardOptions options = {});

// ---- elementwise -----------------------------------------------------------
// Binary ops require equal shapes or a single-element operand.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var log(const Var& a);
Var exp(const Var& a);
Var sqrt(const Var& a);
/// log(1 + e^x), evaluated without overflow.
Var softplus(const Var& a);
/// sqrt(x^2 + eps): |x| with a smooth kink.
Var smooth_abs(const Var& a, double eps = 1e-12);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }

// ---- reductions and shape ---------------------------------------------------

Var sum(const Var& a);
Var mean(const Var& a);
/// Broadcasts a single-element value to `shape`.
Var broadcast_to(const Var& a, const Shape& shape);
Var reshape(const Var& a, const Shape& shape);

/// (N*m, ...) -> (N, ...): out[n] = sum_k weights[k] * in[n*m + k].
Var fold_batch(const Var& a, const std::vector<double>& weights);
/// (N, ...) -> (N*m, ...): out[n*m + k] = weights[k] * in[n]. Adjoint of fold_batch.
Var repeat_batch(const Var& a, const std::vector<double>& weights);

// ---- convolution and pooling -------------------------------------------------
// Valid cross-correlation, stride 1, no padding, no bias.
// input N x C x H x W, kernel O x C x KH x KW -> N x O x (H-KH+1) x (W-KW+1).

Var conv2d(const Var& input, const Var& kernel);
/// Adjoint of conv2d in its input: maps an output-shaped gradient back to input space.
Var conv2d_input_grad(const Var& grad_output, const Var& kernel, const Shape& input_shape);
/// Adjoint of conv2d in its kernel.
Var conv2d_kernel_grad(const Var& input, const Var& grad_output, const Shape& kernel_shape);

/// N x C x H x W -> N x C, summing over space.
Var spatial_sum(const Var& a);
/// N x C -> N x C x H x W, copying each value over space. Adjoint of spatial_sum.
Var spatial_expand(const Var& a, Index height, Index width);
/// Per-channel spatial mean.
Var global_average_pool(const Var& a);

}  // namespace absentia
