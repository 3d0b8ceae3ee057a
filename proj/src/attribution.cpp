#include "absentia/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace absentia {

IntegrationRule parse_integration_rule(const std::string& text) {
  if (text == "midpoint") return IntegrationRule::midpoint;
  if (text == "trapezoid") return IntegrationRule::trapezoid;
  if (text == "right") return IntegrationRule::right;
  throw std::invalid_argument("unknown integration rule '" + text + "'");
}

std::string to_string(IntegrationRule rule) {
  switch (rule) {
    case IntegrationRule::midpoint: return "midpoint";
    case IntegrationRule::trapezoid: return "trapezoid";
    case IntegrationRule::right: return "right";
  }
  return "?";
}

void AttributionConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("attribution needs at least one step, got " + std::to_string(steps));
}

IntegrationPath integration_path(int steps, IntegrationRule rule) {
  if (steps < 1) throw std::invalid_argument("integration path needs at least one step");
  IntegrationPath path;
  const double m = steps;
  switch (rule) {
    case IntegrationRule::midpoint:
      for (int k = 0; k < steps; ++k) {
        path.alphas.push_back((k + 0.5) / m);
        path.weights.push_back(1.0 / m);
      }
      break;
    case IntegrationRule::right:
      for (int k = 1; k <= steps; ++k) {
        path.alphas.push_back(k / m);
        path.weights.push_back(1.0 / m);
      }
      break;
    case IntegrationRule::trapezoid:
      for (int k = 0; k <= steps; ++k) {
        path.alphas.push_back(k / m);
        path.weights.push_back((k == 0 || k == steps ? 0.5 : 1.0) / m);
      }
      break;
  }
  return path;
}

Var integrated_gradients(const BatchScalarFn& f, const Tensor& x, const Tensor& baseline,
                         const IntegrationPath& path, bool create_graph) {
  if (x.shape() != baseline.shape())
    throw std::invalid_argument("baseline shape " + shape_str(baseline.shape()) + " differs from input " +
                                shape_str(x.shape()));
  if (x.rank() < 1 || x.dim(0) == 0) throw std::invalid_argument("integrated_gradients: empty batch");
  const Index n = x.dim(0);
  const Index m = static_cast<Index>(path.alphas.size());
  const Index inner = x.numel() / n;
  const Eigen::ArrayXd diff = x.data() - baseline.data();

  Shape shape = x.shape();
  shape[0] = n * m;
  Tensor points(shape);
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < m; ++k)
      points.data().segment((i * m + k) * inner, inner) =
          baseline.data().segment(i * inner, inner) + path.alphas[static_cast<std::size_t>(k)] * diff.segment(i * inner, inner);

  GradModeGuard recording(true);
  const Var input = Var::param(std::move(points));
  const Var values = f(input);
  if (values.shape() != Shape{n * m})
    throw std::invalid_argument("integrated_gradients: target function must return one value per sample");
  const Var g = grad(sum(values), input, {.create_graph = create_graph, .allow_unused = true});
  const Var averaged = fold_batch(g, path.weights);
  const Var result = mul(averaged, Var::constant(Tensor(x.shape(), diff)));
  return create_graph ? result : result.detach();
}

Var select_outputs(const Var& logits, std::span<const int> targets) {
  if (logits.value().rank() != 2 || logits.shape()[0] != static_cast<Index>(targets.size()))
    throw std::invalid_argument("select_outputs: logits " + shape_str(logits.shape()) + " for " +
                                std::to_string(targets.size()) + " targets");
  const Index n = logits.shape()[0], k = logits.shape()[1];
  Tensor pick(Shape{n, k});
  for (Index i = 0; i < n; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= k) throw std::invalid_argument("target output " + std::to_string(t) + " out of range");
    pick[i * k + t] = 1.0;
  }
  return reshape(spatial_sum(reshape(mul(logits, Var::constant(std::move(pick))), {n, 1, k, 1})), {n});
}

namespace {

Tensor baseline_for(const AttributionConfig& config, const Tensor& x) {
  if (!config.baseline) return Tensor::zeros_like(x);
  if (config.baseline->shape() != x.shape())
    throw std::invalid_argument("baseline shape " + shape_str(config.baseline->shape()) + " differs from input " +
                                shape_str(x.shape()));
  return *config.baseline;
}

Tensor with_batch_axis(const Tensor& x) {
  Shape s{1};
  s.insert(s.end(), x.shape().begin(), x.shape().end());
  return x.reshaped(s);
}

Tensor rows(const Tensor& x, Index start, Index count) {
  Shape s = x.shape();
  const Index inner = x.numel() / s[0];
  s[0] = count;
  return Tensor(s, x.data().segment(start * inner, count * inner));
}

// Evaluations per chunk; bounds peak memory of the interpolation batch.
constexpr Index kChunkEvaluations = 512;

AttributionMap single_map(const BatchScalarFn& f, const Tensor& x, const AttributionConfig& config,
                          std::string target) {
  config.validate();
  const Tensor batch = with_batch_axis(x);
  const Tensor base = with_batch_axis(baseline_for(config, x));
  AttributionMap map;
  map.values = integrated_gradients(f, batch, base, integration_path(config.steps, config.rule)).value().reshaped(x.shape());
  map.target = std::move(target);
  map.steps = config.steps;
  map.rule = config.rule;
  {
    NoGradGuard no_grad;
    map.output = f(Var::constant(batch)).item();
    map.baseline_output = f(Var::constant(base)).item();
  }
  map.completeness_gap = std::abs(map.values.data().sum() - (map.output - map.baseline_output));
  return map;
}

}  // namespace

BatchAttribution attribute_outputs(const Model& model, const Tensor& images, std::span<const int> targets,
                                   const AttributionConfig& config) {
  config.validate();
  if (images.rank() != 4) throw std::invalid_argument("attribute_outputs expects N x C x H x W images");
  const Index n = images.dim(0);
  if (static_cast<Index>(targets.size()) != n) throw std::invalid_argument("one target per image required");
  Tensor single_base;
  if (config.baseline) {
    if (config.baseline->shape() != Shape(images.shape().begin() + 1, images.shape().end()))
      throw std::invalid_argument("baseline must have the shape of one image");
    single_base = *config.baseline;
  }
  const IntegrationPath path = integration_path(config.steps, config.rule);
  const Index per_chunk = std::max<Index>(1, kChunkEvaluations / static_cast<Index>(path.alphas.size()));
  const std::vector<Var> weights = model.constants();

  BatchAttribution out;
  out.values = Tensor(images.shape());
  const Index inner = images.numel() / std::max<Index>(n, 1);
  for (Index start = 0; start < n; start += per_chunk) {
    const Index count = std::min(per_chunk, n - start);
    const Tensor x = rows(images, start, count);
    Tensor base(x.shape());
    if (config.baseline)
      for (Index i = 0; i < count; ++i) base.data().segment(i * inner, inner) = single_base.data();
    const std::span<const int> chunk_targets = targets.subspan(static_cast<std::size_t>(start), static_cast<std::size_t>(count));
    std::vector<int> repeated;
    for (int t : chunk_targets) repeated.insert(repeated.end(), path.alphas.size(), t);
    const Var attr = integrated_gradients(
        [&](const Var& b) { return select_outputs(forward(model.spec, weights, b), repeated); }, x, base, path);
    out.values.data().segment(start * inner, count * inner) = attr.value().data();

    NoGradGuard no_grad;
    const Var fx = select_outputs(forward(model.spec, weights, Var::constant(x)), chunk_targets);
    const Var fb = select_outputs(forward(model.spec, weights, Var::constant(base)), chunk_targets);
    for (Index i = 0; i < count; ++i) {
      const double total = attr.value().data().segment(i * inner, inner).sum();
      out.outputs.push_back(fx.value()[i]);
      out.baseline_outputs.push_back(fb.value()[i]);
      out.gaps.push_back(std::abs(total - (fx.value()[i] - fb.value()[i])));
    }
  }
  return out;
}

AttributionMap integrated_gradients(const Model& model, const Tensor& x, int target, const AttributionConfig& config) {
  const Index outputs = model.spec.output_channels();
  if (target < 0 || target >= outputs)
    throw std::invalid_argument("target output " + std::to_string(target) + " out of range for " +
                                std::to_string(outputs) + " outputs");
  const std::vector<Var> weights = model.constants();
  const NeuronRef neuron{static_cast<int>(model.spec.layers.size()) - 1, target, std::nullopt};
  return single_map([&](const Var& b) { return neuron_activation(model.spec, weights, b, neuron); }, x, config,
                    "output:" + std::to_string(target));
}

AttributionMap non_target_attribution(const Model& model, const Tensor& x, int label, const AttributionConfig& config) {
  if (model.spec.output_channels() != 2)
    throw std::invalid_argument("non-target attribution by complement needs a two-output model");
  if (label != 0 && label != 1) throw std::invalid_argument("label must be 0 or 1");
  AttributionMap map = integrated_gradients(model, x, 1 - label, config);
  map.method = "non_target_integrated_gradients";
  return map;
}

AttributionMap neuron_attribution(const Model& model, const Tensor& x, const NeuronRef& neuron,
                                  const AttributionConfig& config) {
  neuron.validate(model.spec);
  const std::vector<Var> weights = model.constants();
  return single_map([&](const Var& b) { return neuron_activation(model.spec, weights, b, neuron); }, x, config,
                    "neuron:" + neuron.str());
}

std::vector<double> channel_importance(const Model& model, const Tensor& x, int target, int layer,
                                       const AttributionConfig& config) {
  config.validate();
  const int last = static_cast<int>(model.spec.layers.size()) - 1;
  if (layer < 0 || layer >= last) throw std::invalid_argument("channel importance needs a layer before the output");
  if (target < 0 || target >= model.spec.output_channels()) throw std::invalid_argument("target output out of range");
  if (config.baseline) throw std::invalid_argument("channel importance uses a zero baseline");
  const std::vector<Var> weights = model.constants();
  Tensor z;
  {
    NoGradGuard no_grad;
    z = forward_range(model.spec, weights, Var::constant(with_batch_axis(x)), 0, layer).value();
  }
  const Var attr = integrated_gradients(
      [&](const Var& b) {
        const std::vector<int> targets(static_cast<std::size_t>(b.shape()[0]), target);
        return select_outputs(forward_range(model.spec, weights, b, layer + 1, last), targets);
      },
      z, Tensor::zeros_like(z), integration_path(config.steps, config.rule));
  const Index c = z.dim(1);
  const Index spatial = z.numel() / c;
  std::vector<double> out(static_cast<std::size_t>(c));
  for (Index k = 0; k < c; ++k) out[static_cast<std::size_t>(k)] = attr.value().data().segment(k * spatial, spatial).sum();
  return out;
}

std::vector<Index> select_channels(std::span<const double> importance, double threshold) {
  double positive = 0.0;
  for (double v : importance) positive += std::max(v, 0.0);
  std::vector<Index> out;
  if (positive <= 0.0) return out;
  for (std::size_t k = 0; k < importance.size(); ++k)
    if (std::max(importance[k], 0.0) / positive >= threshold) out.push_back(static_cast<Index>(k));
  return out;
}

namespace {

Eigen::ArrayXd expand_mask(const Tensor& values, const Tensor& mask) {
  if (!((mask.data() == 0.0) || (mask.data() == 1.0)).all()) throw std::invalid_argument("mask must be binary");
  if (mask.shape() == values.shape()) return mask.data();
  const Shape& vs = values.shape();
  const Shape& ms = mask.shape();
  if (ms.size() != 2 || vs.size() < 2 || ms[0] != vs[vs.size() - 2] || ms[1] != vs[vs.size() - 1])
    throw std::invalid_argument("mask shape " + shape_str(ms) + " does not match attribution " + shape_str(vs));
  return mask.data().replicate(values.numel() / mask.numel(), 1);
}

}  // namespace

double mask_relative_attribution(const Tensor& values, const Tensor& mask) {
  const Eigen::ArrayXd m = expand_mask(values, mask);
  const double total = values.data().abs().sum();
  if (total == 0.0) return 0.0;
  return (values.data() * m).abs().sum() / total;
}

double negative_mass(const Tensor& values, const Tensor& mask) {
  const Eigen::ArrayXd m = expand_mask(values, mask);
  return (-(values.data() * m)).max(0.0).sum();
}

}  // namespace absentia
