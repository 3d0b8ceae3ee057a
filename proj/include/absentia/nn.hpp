#pragma once

// Layer-list models, the two hand-specified/trained architectures and the
// bias-experiment CNN, losses, Adam, training and checkpoint persistence.

#include "absentia/autodiff.hpp"
#include "absentia/io.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace absentia {

struct Conv2d {
  Index out_channels = 1;
  Index in_channels = 1;
  Index kernel_h = 1;
  Index kernel_w = 1;
  bool trainable = true;

  Shape kernel_shape() const { return {out_channels, in_channels, kernel_h, kernel_w}; }
};
struct Relu {};
struct GlobalAvgPool {};

using Layer = std::variant<Conv2d, Relu, GlobalAvgPool>;

struct ModelSpec {
  std::string name;
  std::vector<Layer> layers;

  /// Throws if consecutive layers are not shape-compatible.
  void validate() const;
  Index input_channels() const;
  Index output_channels() const;
  /// Channel count of the output of layer `layer`.
  Index channels_after(int layer) const;
  /// Index into the weight list for a conv layer, or -1.
  int weight_index(int layer) const;
  std::vector<int> conv_layers() const;
};

/// A spec plus one kernel tensor per conv layer (in layer order).
struct Model {
  ModelSpec spec;
  std::vector<Tensor> weights;

  /// Weights as graph leaves; non-trainable kernels are constants.
  std::vector<Var> parameters() const;
  /// Weights as graph constants.
  std::vector<Var> constants() const;
};

/// A channel of a layer's output, or a unit direction over its channels.
/// The activation is the spatial mean (post-GAP value) of that layer output.
struct NeuronRef {
  int layer = 0;
  Index channel = 0;
  std::optional<std::vector<double>> direction;

  void validate(const ModelSpec& spec) const;
  std::string str() const;
  /// Parses "layer:channel".
  static NeuronRef parse(const std::string& text);
};

/// Applies layers [first, last] (inclusive) to `x`.
Var forward_range(const ModelSpec& spec, std::span<const Var> weights, const Var& x, int first, int last);
inline Var forward(const ModelSpec& spec, std::span<const Var> weights, const Var& x) {
  return forward_range(spec, weights, x, 0, static_cast<int>(spec.layers.size()) - 1);
}
/// Per-sample activation (N) of a neuron or direction for the input batch.
Var neuron_activation(const ModelSpec& spec, std::span<const Var> weights, const Var& x, const NeuronRef& neuron);

/// Graph-free evaluation of the model outputs for a batch.
Tensor predict(const Model& model, const Tensor& x);
Tensor neuron_values(const Model& model, const Tensor& x, const NeuronRef& neuron);
std::vector<int> argmax_rows(const Tensor& logits);

/// Directional-motion CNN with fixed weights (input: 2 frames as channels).
Model build_reichardt_model();
/// 3->2 (1x1) -> ReLU -> 2->2 (1x1) -> GAP, uniform init from `seed`.
Model build_toy_model(std::uint64_t seed);
/// 3->8 (3x3) -> ReLU -> 8->8 (3x3) -> ReLU -> 8->2 (1x1) -> GAP.
Model build_bias_model(std::uint64_t seed);
/// Uniform init in [-scale, scale] for every trainable kernel.
void initialize_uniform(Model& model, std::uint64_t seed, double scale = 0.5);

Tensor one_hot(const std::vector<int>& labels, Index classes);
/// Mean binary cross-entropy of independent sigmoid outputs (log-sum-exp form).
Var bce_loss(const Var& logits, const Tensor& targets);

struct AdamConfig {
  double lr = 0.01;
  double weight_decay = 1e-4;  // L2 term added to the gradient
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Shrink the weights directly (p -= lr * wd * p) instead of adding the L2 term.
  bool decoupled_weight_decay = false;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long step = 0;

  static AdamState zeros_like(const std::vector<Tensor>& params);
};

/// In-place Adam update. Entries with `frozen[i]` set are skipped.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               const AdamConfig& config, const std::vector<bool>& frozen = {});

/// Images (N x C x H x W), labels, and optional per-image masks (N x H x W).
struct LabeledData {
  Tensor images;
  std::vector<int> labels;
  std::optional<Tensor> masks;

  Index size() const { return static_cast<Index>(labels.size()); }
  LabeledData gather(std::span<const Index> indices) const;
};

/// Additional training loss built from the current weights and the batch.
using ExtraLoss = std::function<Var(std::span<const Var> weights, const LabeledData& batch)>;

struct TrainConfig {
  double lr = 0.01;
  double weight_decay = 1e-4;
  bool decoupled_weight_decay = false;
  int epochs = 15;
  Index batch_size = 256;
  std::uint64_t seed = 0;
  ExtraLoss extra_loss;
};

struct TrainMeta {
  std::uint64_t seed = 0;
  int epochs = 0;
  std::vector<double> epoch_losses;
  bool failed = false;
  std::string failure;
  json extra = json::object();
};

struct Checkpoint {
  static constexpr int kVersion = 1;
  Model model;
  TrainMeta meta;
};

/// Shuffled mini-batch Adam on the two-output BCE loss plus `extra_loss`.
/// A non-finite loss marks the run failed instead of throwing.
Checkpoint train(const Model& init, const LabeledData& data, const TrainConfig& config);
double accuracy(const Model& model, const LabeledData& data);

json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const json& j);
json checkpoint_to_json(const Checkpoint& checkpoint);
Checkpoint checkpoint_from_json(const json& j);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace absentia
