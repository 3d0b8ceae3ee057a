#include "absentia/autodiff.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>

namespace absentia {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                              shape_str(b));
}

// Result shape of a binary elementwise op with single-element broadcast.
Shape binary_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.numel() == 1) return a.shape();
  if (a.numel() == 1) return b.shape();
  shape_error(op, a.shape(), b.shape());
}

template <typename F>
Tensor binary_value(const char* op, const Tensor& a, const Tensor& b, F f) {
  Shape shape = binary_shape(op, a, b);
  if (a.numel() == b.numel()) return Tensor(shape, f(a.data(), b.data()));
  if (b.numel() == 1) return Tensor(shape, f(a.data(), Eigen::ArrayXd::Constant(a.numel(), b[0])));
  return Tensor(shape, f(Eigen::ArrayXd::Constant(b.numel(), a[0]), b.data()));
}

// Sums a broadcast gradient back down to the operand's shape.
Var unbroadcast(const Var& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  return reshape(sum(g), shape);
}

void require_rank(const char* op, const Tensor& t, Index rank) {
  if (t.rank() != rank)
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + shape_str(t.shape()));
}

struct ConvDims {
  Index n, c, h, w, o, kh, kw, oh, ow;
  Index ckk() const { return c * kh * kw; }
  Index p() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1; }
};

ConvDims conv_dims(const Shape& input, const Shape& kernel) {
  if (input.size() != 4 || kernel.size() != 4) shape_error("conv2d", input, kernel);
  ConvDims d{input[0], input[1], input[2], input[3], kernel[0], kernel[2], kernel[3], 0, 0};
  if (kernel[1] != d.c)
    throw std::invalid_argument("conv2d: kernel expects " + std::to_string(kernel[1]) +
                                " input channels, input has " + std::to_string(d.c));
  if (d.kh > d.h || d.kw > d.w)
    throw std::invalid_argument("conv2d: kernel " + shape_str(kernel) + " larger than input " +
                                shape_str(input));
  d.oh = d.h - d.kh + 1;
  d.ow = d.w - d.kw + 1;
  return d;
}

void im2col(const double* image, const ConvDims& d, RowMat& col) {
  col.resize(d.ckk(), d.p());
  for (Index c = 0; c < d.c; ++c)
    for (Index i = 0; i < d.kh; ++i)
      for (Index j = 0; j < d.kw; ++j) {
        double* row = col.data() + ((c * d.kh + i) * d.kw + j) * d.p();
        for (Index y = 0; y < d.oh; ++y) {
          const double* src = image + (c * d.h + y + i) * d.w + j;
          std::copy(src, src + d.ow, row + y * d.ow);
        }
      }
}

void col2im_add(const RowMat& col, const ConvDims& d, double* image) {
  for (Index c = 0; c < d.c; ++c)
    for (Index i = 0; i < d.kh; ++i)
      for (Index j = 0; j < d.kw; ++j) {
        const double* row = col.data() + ((c * d.kh + i) * d.kw + j) * d.p();
        for (Index y = 0; y < d.oh; ++y) {
          double* dst = image + (c * d.h + y + i) * d.w + j;
          const double* src = row + y * d.ow;
          for (Index x = 0; x < d.ow; ++x) dst[x] += src[x];
        }
      }
}

Tensor conv_forward(const Tensor& input, const Tensor& kernel) {
  const ConvDims d = conv_dims(input.shape(), kernel.shape());
  Tensor out(Shape{d.n, d.o, d.oh, d.ow});
  Eigen::Map<const RowMat> k(kernel.ptr(), d.o, d.ckk());
  RowMat col;
  for (Index n = 0; n < d.n; ++n) {
    const double* image = input.ptr() + n * d.c * d.h * d.w;
    Eigen::Map<RowMat> y(out.ptr() + n * d.o * d.p(), d.o, d.p());
    if (d.pointwise()) {
      y.noalias() = k * Eigen::Map<const RowMat>(image, d.c, d.p());
    } else {
      im2col(image, d, col);
      y.noalias() = k * col;
    }
  }
  return out;
}

Tensor conv_input_grad(const Tensor& grad_output, const Tensor& kernel, const Shape& input_shape) {
  const ConvDims d = conv_dims(input_shape, kernel.shape());
  if (grad_output.shape() != Shape{d.n, d.o, d.oh, d.ow})
    shape_error("conv2d_input_grad", grad_output.shape(), kernel.shape());
  Tensor out(input_shape);
  Eigen::Map<const RowMat> k(kernel.ptr(), d.o, d.ckk());
  RowMat col;
  for (Index n = 0; n < d.n; ++n) {
    Eigen::Map<const RowMat> g(grad_output.ptr() + n * d.o * d.p(), d.o, d.p());
    double* image = out.ptr() + n * d.c * d.h * d.w;
    if (d.pointwise()) {
      Eigen::Map<RowMat>(image, d.c, d.p()).noalias() = k.transpose() * g;
    } else {
      col.noalias() = k.transpose() * g;
      col2im_add(col, d, image);
    }
  }
  return out;
}

Tensor conv_kernel_grad(const Tensor& input, const Tensor& grad_output, const Shape& kernel_shape) {
  const ConvDims d = conv_dims(input.shape(), kernel_shape);
  if (grad_output.shape() != Shape{d.n, d.o, d.oh, d.ow})
    shape_error("conv2d_kernel_grad", grad_output.shape(), kernel_shape);
  Tensor out(kernel_shape);
  Eigen::Map<RowMat> k(out.ptr(), d.o, d.ckk());
  RowMat col;
  for (Index n = 0; n < d.n; ++n) {
    Eigen::Map<const RowMat> g(grad_output.ptr() + n * d.o * d.p(), d.o, d.p());
    const double* image = input.ptr() + n * d.c * d.h * d.w;
    if (d.pointwise()) {
      k.noalias() += g * Eigen::Map<const RowMat>(image, d.c, d.p()).transpose();
    } else {
      im2col(image, d, col);
      k.noalias() += g * col.transpose();
    }
  }
  return out;
}

Tensor fold_value(const Tensor& a, const std::vector<double>& weights) {
  const Index m = static_cast<Index>(weights.size());
  if (m == 0 || a.rank() < 1 || a.dim(0) % m != 0)
    throw std::invalid_argument("fold_batch: leading extent " + shape_str(a.shape()) +
                                " not divisible by " + std::to_string(m));
  Shape shape = a.shape();
  shape[0] /= m;
  const Index inner = shape_numel(shape) / std::max<Index>(shape[0], 1);
  Tensor out(shape);
  for (Index n = 0; n < shape[0]; ++n)
    for (Index k = 0; k < m; ++k)
      out.data().segment(n * inner, inner) += weights[k] * a.data().segment((n * m + k) * inner, inner);
  return out;
}

Tensor repeat_value(const Tensor& a, const std::vector<double>& weights) {
  const Index m = static_cast<Index>(weights.size());
  if (m == 0 || a.rank() < 1) throw std::invalid_argument("repeat_batch: bad arguments");
  Shape shape = a.shape();
  shape[0] *= m;
  const Index inner = a.dim(0) == 0 ? 0 : a.numel() / a.dim(0);
  Tensor out(shape);
  for (Index n = 0; n < a.dim(0); ++n)
    for (Index k = 0; k < m; ++k)
      out.data().segment((n * m + k) * inner, inner) = weights[k] * a.data().segment(n * inner, inner);
  return out;
}

}  // namespace

// ---- graph ------------------------------------------------------------------

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  if (!value.all_finite()) throw std::domain_error("non-finite value in tensor " + shape_str(value.shape()));
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var make_result(Tensor value, std::vector<Var> inputs, detail::BackwardFn backward, const char* op) {
  if (!value.all_finite()) throw std::domain_error(std::string(op) + " produced non-finite values");
  Var out;
  out.node_ = std::make_shared<detail::Node>();
  out.node_->value = std::move(value);
  out.node_->op = op;
  bool track = false;
  if (g_grad_enabled)
    for (const Var& in : inputs) track = track || in.requires_grad();
  if (track) {
    out.node_->requires_grad = true;
    out.node_->inputs = std::move(inputs);
    out.node_->backward = std::move(backward);
  }
  return out;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }
GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

std::vector<Var> grad(const Var& root, std::span<const Var> wrt, BackwardOptions options) {
  if (!root.defined()) throw std::invalid_argument("grad: undefined root");
  if (root.numel() != 1)
    throw std::invalid_argument("grad: root must be scalar, got shape " + shape_str(root.shape()));

  using NodeP = const detail::Node*;
  // Iterative post-order DFS; parents are visited in input order so the
  // traversal (and therefore accumulation order) is deterministic.
  std::vector<NodeP> order;
  if (root.requires_grad()) {
    std::unordered_set<NodeP> seen;
    std::vector<std::pair<NodeP, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        const Var& in = node->inputs[next++];
        if (in.requires_grad() && seen.insert(in.node()).second) stack.emplace_back(in.node(), 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unordered_set<NodeP> requested;
  for (const Var& v : wrt) {
    if (!v.defined()) throw std::invalid_argument("grad: undefined input");
    requested.insert(v.node());
  }

  std::unordered_map<NodeP, Var> grads;
  {
    GradModeGuard mode(options.create_graph);
    if (root.requires_grad()) grads.emplace(root.node(), Var(Tensor(root.shape(), 1.0)));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      NodeP node = *it;
      auto found = grads.find(node);
      if (found == grads.end()) continue;
      if (node->backward) {
        const Var g = found->second;
        if (!requested.count(node)) grads.erase(found);
        std::vector<Var> in_grads = node->backward(g);
        for (std::size_t i = 0; i < node->inputs.size() && i < in_grads.size(); ++i) {
          const Var& in = node->inputs[i];
          if (!in.requires_grad() || !in_grads[i].defined()) continue;
          auto [slot, fresh] = grads.try_emplace(in.node(), in_grads[i]);
          if (!fresh) slot->second = add(slot->second, in_grads[i]);
        }
      }
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& v : wrt) {
    auto found = grads.find(v.node());
    if (found != grads.end()) {
      out.push_back(found->second);
    } else if (options.allow_unused) {
      out.emplace_back(Tensor::zeros_like(v.value()));
    } else {
      throw std::invalid_argument("grad: requested input is not reachable from the root");
    }
  }
  return out;
}

Var grad(const Var& root, const Var& wrt, BackwardOptions options) {
  return grad(root, std::span<const Var>(&wrt, 1), options).front();
}

// ---- elementwise ------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  Tensor v = binary_value("add", a.value(), b.value(), [](const auto& x, const auto& y) { return (x + y).eval(); });
  const Shape sa = a.shape(), sb = b.shape();
  return make_result(std::move(v), {a, b}, [sa, sb, a, b](const Var& g) {
    return std::vector<Var>{a.requires_grad() ? unbroadcast(g, sa) : Var(),
                            b.requires_grad() ? unbroadcast(g, sb) : Var()};
  }, "add");
}

Var sub(const Var& a, const Var& b) {
  Tensor v = binary_value("sub", a.value(), b.value(), [](const auto& x, const auto& y) { return (x - y).eval(); });
  const Shape sa = a.shape(), sb = b.shape();
  return make_result(std::move(v), {a, b}, [sa, sb, a, b](const Var& g) {
    return std::vector<Var>{a.requires_grad() ? unbroadcast(g, sa) : Var(),
                            b.requires_grad() ? unbroadcast(neg(g), sb) : Var()};
  }, "sub");
}

Var mul(const Var& a, const Var& b) {
  Tensor v = binary_value("mul", a.value(), b.value(), [](const auto& x, const auto& y) { return (x * y).eval(); });
  return make_result(std::move(v), {a, b}, [a, b](const Var& g) {
    return std::vector<Var>{a.requires_grad() ? unbroadcast(mul(g, b), a.shape()) : Var(),
                            b.requires_grad() ? unbroadcast(mul(g, a), b.shape()) : Var()};
  }, "mul");
}

Var div(const Var& a, const Var& b) {
  if ((b.value().data() == 0.0).any()) throw std::domain_error("div: division by zero");
  Tensor v = binary_value("div", a.value(), b.value(), [](const auto& x, const auto& y) { return (x / y).eval(); });
  return make_result(std::move(v), {a, b}, [a, b](const Var& g) {
    return std::vector<Var>{a.requires_grad() ? unbroadcast(div(g, b), a.shape()) : Var(),
                            b.requires_grad() ? unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape()) : Var()};
  }, "div");
}

Var scale(const Var& a, double c) {
  Tensor v(a.shape(), (a.value().data() * c).eval());
  return make_result(std::move(v), {a}, [c](const Var& g) { return std::vector<Var>{scale(g, c)}; }, "scale");
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var add_scalar(const Var& a, double c) {
  Tensor v(a.shape(), (a.value().data() + c).eval());
  return make_result(std::move(v), {a}, [](const Var& g) { return std::vector<Var>{g}; }, "add_scalar");
}

Var relu(const Var& a) {
  Tensor v(a.shape(), a.value().data().max(0.0).eval());
  return make_result(std::move(v), {a}, [a](const Var& g) {
    // Subgradient 0 at exactly 0; the mask is piecewise constant.
    Tensor mask(a.shape(), (a.value().data() > 0.0).cast<double>().eval());
    return std::vector<Var>{mul(g, Var::constant(std::move(mask)))};
  }, "relu");
}

Var sigmoid(const Var& a) {
  const Eigen::ArrayXd& x = a.value().data();
  Eigen::ArrayXd s(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    if (x[i] >= 0) {
      s[i] = 1.0 / (1.0 + std::exp(-x[i]));
    } else {
      const double e = std::exp(x[i]);
      s[i] = e / (1.0 + e);
    }
  }
  return make_result(Tensor(a.shape(), std::move(s)), {a}, [a](const Var& g) {
    Var s = sigmoid(a);
    return std::vector<Var>{mul(g, sub(s, mul(s, s)))};
  }, "sigmoid");
}

Var log(const Var& a) {
  if ((a.value().data() <= 0.0).any()) throw std::domain_error("log: non-positive argument");
  Tensor v(a.shape(), a.value().data().log().eval());
  return make_result(std::move(v), {a}, [a](const Var& g) { return std::vector<Var>{div(g, a)}; }, "log");
}

Var exp(const Var& a) {
  Tensor v(a.shape(), a.value().data().exp().eval());
  return make_result(std::move(v), {a}, [a](const Var& g) { return std::vector<Var>{mul(g, exp(a))}; }, "exp");
}

Var sqrt(const Var& a) {
  if ((a.value().data() < 0.0).any()) throw std::domain_error("sqrt: negative argument");
  Tensor v(a.shape(), a.value().data().sqrt().eval());
  return make_result(std::move(v), {a}, [a](const Var& g) {
    return std::vector<Var>{div(scale(g, 0.5), sqrt(a))};
  }, "sqrt");
}

Var softplus(const Var& a) {
  const Eigen::ArrayXd& x = a.value().data();
  Tensor v(a.shape(), (x.max(0.0) + (-x.abs()).exp().log1p()).eval());
  return make_result(std::move(v), {a}, [a](const Var& g) { return std::vector<Var>{mul(g, sigmoid(a))}; },
                     "softplus");
}

Var smooth_abs(const Var& a, double eps) { return sqrt(add_scalar(mul(a, a), eps)); }

// ---- reductions and shape ---------------------------------------------------

Var sum(const Var& a) {
  const Shape shape = a.shape();
  return make_result(Tensor::scalar(a.value().data().sum()), {a}, [shape](const Var& g) {
    return std::vector<Var>{broadcast_to(g, shape)};
  }, "sum");
}

Var mean(const Var& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Var broadcast_to(const Var& a, const Shape& shape) {
  if (a.numel() != 1) shape_error("broadcast_to", a.shape(), shape);
  const Shape from = a.shape();
  return make_result(Tensor(shape, a.value()[0]), {a}, [from](const Var& g) {
    return std::vector<Var>{reshape(sum(g), from)};
  }, "broadcast_to");
}

Var reshape(const Var& a, const Shape& shape) {
  const Shape from = a.shape();
  return make_result(a.value().reshaped(shape), {a}, [from](const Var& g) {
    return std::vector<Var>{reshape(g, from)};
  }, "reshape");
}

Var fold_batch(const Var& a, const std::vector<double>& weights) {
  return make_result(fold_value(a.value(), weights), {a}, [weights](const Var& g) {
    return std::vector<Var>{repeat_batch(g, weights)};
  }, "fold_batch");
}

Var repeat_batch(const Var& a, const std::vector<double>& weights) {
  return make_result(repeat_value(a.value(), weights), {a}, [weights](const Var& g) {
    return std::vector<Var>{fold_batch(g, weights)};
  }, "repeat_batch");
}

// ---- convolution and pooling ------------------------------------------------

Var conv2d(const Var& input, const Var& kernel) {
  return make_result(conv_forward(input.value(), kernel.value()), {input, kernel}, [input, kernel](const Var& g) {
    return std::vector<Var>{
        input.requires_grad() ? conv2d_input_grad(g, kernel, input.shape()) : Var(),
        kernel.requires_grad() ? conv2d_kernel_grad(input, g, kernel.shape()) : Var()};
  }, "conv2d");
}

Var conv2d_input_grad(const Var& grad_output, const Var& kernel, const Shape& input_shape) {
  Tensor v = conv_input_grad(grad_output.value(), kernel.value(), input_shape);
  return make_result(std::move(v), {grad_output, kernel}, [grad_output, kernel](const Var& g) {
    return std::vector<Var>{
        grad_output.requires_grad() ? conv2d(g, kernel) : Var(),
        kernel.requires_grad() ? conv2d_kernel_grad(g, grad_output, kernel.shape()) : Var()};
  }, "conv2d_input_grad");
}

Var conv2d_kernel_grad(const Var& input, const Var& grad_output, const Shape& kernel_shape) {
  Tensor v = conv_kernel_grad(input.value(), grad_output.value(), kernel_shape);
  return make_result(std::move(v), {input, grad_output}, [input, grad_output](const Var& g) {
    return std::vector<Var>{
        input.requires_grad() ? conv2d_input_grad(grad_output, g, input.shape()) : Var(),
        grad_output.requires_grad() ? conv2d(input, g) : Var()};
  }, "conv2d_kernel_grad");
}

Var spatial_sum(const Var& a) {
  require_rank("spatial_sum", a.value(), 4);
  const Index n = a.shape()[0], c = a.shape()[1], h = a.shape()[2], w = a.shape()[3];
  if (h < 1 || w < 1) throw std::invalid_argument("spatial_sum: empty spatial extent");
  Eigen::Map<const RowMat> x(a.value().ptr(), n * c, h * w);
  Tensor v(Shape{n, c}, x.rowwise().sum().array().eval());
  return make_result(std::move(v), {a}, [h, w](const Var& g) { return std::vector<Var>{spatial_expand(g, h, w)}; },
                     "spatial_sum");
}

Var spatial_expand(const Var& a, Index height, Index width) {
  require_rank("spatial_expand", a.value(), 2);
  const Index n = a.shape()[0], c = a.shape()[1];
  Tensor v(Shape{n, c, height, width});
  Eigen::Map<RowMat> out(v.ptr(), n * c, height * width);
  out.colwise() = a.value().data().matrix();
  return make_result(std::move(v), {a}, [](const Var& g) { return std::vector<Var>{spatial_sum(g)}; },
                     "spatial_expand");
}

Var global_average_pool(const Var& a) {
  require_rank("global_average_pool", a.value(), 4);
  return scale(spatial_sum(a), 1.0 / static_cast<double>(a.shape()[2] * a.shape()[3]));
}

}  // namespace absentia
