#pragma once

// Feature visualization by maximization and minimization: most/least
// activating images and patches, and input synthesis by gradient descent.

#include "absentia/synthdata.hpp"

#include <string>
#include <vector>

namespace absentia {

struct ImageActivation {
  Index sample_id = 0;
  double activation = 0.0;
};

/// The k samples with the highest post-GAP activation, descending; ties by id.
std::vector<ImageActivation> top_images(const Model& model, const std::vector<Sample>& samples,
                                        const NeuronRef& neuron, Index k);

enum class PatchMode { max, min };

PatchMode parse_patch_mode(const std::string& text);
std::string to_string(PatchMode mode);

struct PatchRecord {
  Index sample_id = 0;
  int row = 0;
  int col = 0;
  int size = 0;
  double activation = 0.0;  // neuron activation with the patch as the whole input
  int rank = 0;
};

/// Crops a size x size window at (row, col) from a C x H x W image.
Tensor crop(const Tensor& image, int row, int col, int size);

/// Slides a size x size window with the given stride over every sample and
/// evaluates each window on its own. Returns the global top (max) or bottom
/// (min) k windows; ties are broken by sample id, then row, then column.
std::vector<PatchRecord> extreme_patches(const Model& model, const std::vector<Sample>& samples,
                                         const NeuronRef& neuron, int size, int stride, Index k, PatchMode mode);

struct SynthesisResult {
  Tensor input;                // C x H x W in [0, 1]
  std::vector<double> trace;   // activation before each step and after the last
};

struct SynthesisConfig {
  int steps = 200;
  double lr = 0.05;  // largest per-pixel change per step
  std::uint64_t seed = 0;
  bool maximize = false;
};

/// Gradient descent on the neuron's activation (ascent when maximizing) from
/// seeded uniform noise. Steps are scaled so the largest pixel change is
/// `lr`; values are clamped to [0, 1] after every step.
SynthesisResult minimize_input(const Model& model, const NeuronRef& neuron, const Shape& shape,
                               const SynthesisConfig& config = {});

/// <v, z> for the post-GAP output z of `layer` on a single C x H x W input.
double direction_activation(const Model& model, const Tensor& x, int layer, const std::vector<double>& v);

}  // namespace absentia
