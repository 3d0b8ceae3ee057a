#pragma once

// Integrated Gradients towards arbitrary outputs or neurons, including
// non-target attribution (explaining an output on inputs of another class).

#include "absentia/nn.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace absentia {

enum class IntegrationRule { midpoint, trapezoid, right };

IntegrationRule parse_integration_rule(const std::string& text);
std::string to_string(IntegrationRule rule);

struct AttributionConfig {
  int steps = 64;
  std::optional<Tensor> baseline;  // zero when unset
  IntegrationRule rule = IntegrationRule::midpoint;

  void validate() const;
};

/// Interpolation points in [0, 1] and their quadrature weights (sum 1).
struct IntegrationPath {
  std::vector<double> alphas;
  std::vector<double> weights;
};
IntegrationPath integration_path(int steps, IntegrationRule rule);

struct AttributionMap {
  Tensor values;  // same shape as the attributed input
  std::string target;
  std::string method = "integrated_gradients";
  int steps = 0;
  IntegrationRule rule = IntegrationRule::midpoint;
  double output = 0.0;           // f(x)
  double baseline_output = 0.0;  // f(baseline)
  double completeness_gap = 0.0;
};

/// Per-sample scalar (shape N) of a batch of inputs.
using BatchScalarFn = std::function<Var(const Var& batch)>;

/// IG of `f` for every sample of `x` (N x ...) against `baseline` (same
/// shape). With `create_graph` the result stays differentiable with respect
/// to whatever `f` closes over, e.g. model weights.
Var integrated_gradients(const BatchScalarFn& f, const Tensor& x, const Tensor& baseline,
                         const IntegrationPath& path, bool create_graph = false);

/// logits (N x K) -> logits[n, targets[n]].
Var select_outputs(const Var& logits, std::span<const int> targets);

struct BatchAttribution {
  Tensor values;  // N x C x H x W
  std::vector<double> outputs;
  std::vector<double> baseline_outputs;
  std::vector<double> gaps;
};

/// Output attributions for a batch of images, one target output per image.
BatchAttribution attribute_outputs(const Model& model, const Tensor& images, std::span<const int> targets,
                                   const AttributionConfig& config = {});

/// Attribution of output `target` for one C x H x W image.
AttributionMap integrated_gradients(const Model& model, const Tensor& x, int target,
                                    const AttributionConfig& config = {});
/// Attribution of the class complementary to `label` (two-output models).
AttributionMap non_target_attribution(const Model& model, const Tensor& x, int label,
                                      const AttributionConfig& config = {});
/// Attribution of a neuron's (or direction's) post-GAP activation.
AttributionMap neuron_attribution(const Model& model, const Tensor& x, const NeuronRef& neuron,
                                  const AttributionConfig& config = {});

/// IG of output `target` with respect to the channels of layer `layer`'s
/// output, summed over space: one value per channel.
std::vector<double> channel_importance(const Model& model, const Tensor& x, int target, int layer,
                                       const AttributionConfig& config = {});
/// Channels whose share of the positive importance is at least `threshold`.
std::vector<Index> select_channels(std::span<const double> importance, double threshold = 0.05);

/// sum |values * mask| / sum |values| (0 when the map is all zero). The mask
/// has the shape of `values` or only its trailing H x W extent.
double mask_relative_attribution(const Tensor& values, const Tensor& mask);
/// Sum of the negative parts of `values` inside `mask`, as a positive number.
double negative_mass(const Tensor& values, const Tensor& mask);

}  // namespace absentia
