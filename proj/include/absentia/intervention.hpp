#pragma once

// Patch-insertion tests: does inserting a concept into highly activating
// images lower the activation more than a random patch does?

#include "absentia/attribution.hpp"
#include "absentia/featviz.hpp"

#include <optional>
#include <vector>

namespace absentia {

enum class Corner { top_left = 0, top_right = 1, bottom_left = 2, bottom_right = 3 };

/// Copy of `image` with `patch` (C x h x w) written at (row, col).
Tensor insert_patch(const Tensor& image, const Tensor& patch, int row, int col);
Tensor insert_patch(const Tensor& image, const Tensor& patch, Corner corner);
Corner random_corner(std::uint64_t seed);

/// Mean absolute step across the inner border of a patch inserted at `corner`
/// (only the sides facing the rest of the image).
double boundary_discontinuity(const Tensor& image, int patch_h, int patch_w, Corner corner);

struct TTest {
  double t = 0.0;
  double p = 1.0;
  int df = 0;
};

/// Two-sided two-sample Student t-test with pooled variance.
TTest t_test_ind(const std::vector<double>& a, const std::vector<double>& b);

/// Regularized incomplete beta function I_x(a, b).
double incomplete_beta(double a, double b, double x);

struct InterventionConfig {
  Index k_images = 20;
  int patch = 8;
  int stride = 4;
  int candidates = 8;  // least/most activating patches cycled over the images
  std::uint64_t seed = 0;
  double alpha = 0.05;
  /// Replaces the least-activating search for every channel when set.
  std::optional<std::vector<Tensor>> inhibitor_patches;

  void validate() const;
};

struct ConditionResult {
  std::vector<double> activations;  // one per top image, same order in every condition
  double mean = 0.0;
  double drop = 0.0;  // mean(none) - mean(condition)
  double boundary = 0.0;
};

struct ChannelIntervention {
  NeuronRef neuron;
  std::vector<Index> image_ids;
  std::vector<int> corners;
  ConditionResult none, random, least, most;
  std::optional<TTest> least_vs_random;  // empty when the test is undefined
  std::optional<TTest> most_vs_random;
  std::vector<PatchRecord> least_patches;
  std::vector<PatchRecord> most_patches;
  bool inhibited = false;
};

struct InterventionReport {
  int layer = 0;
  InterventionConfig config;
  std::vector<ChannelIntervention> channels;
  double significant_fraction = 0.0;
};

ChannelIntervention intervene_channel(const Model& model, const std::vector<Sample>& samples, const NeuronRef& neuron,
                                      const InterventionConfig& config);
/// Runs every channel of `layer` (in parallel) and summarizes significance.
InterventionReport run_intervention(const Model& model, const std::vector<Sample>& samples, int layer,
                                    const InterventionConfig& config);
/// Fraction of channels whose least-activating insertion lowers the mean
/// with p < alpha against the random control.
double significant_inhibition_fraction(const InterventionReport& report);
double significant_inhibition_fraction(const Model& model, const std::vector<Sample>& samples, int layer,
                                       const InterventionConfig& config);

json intervention_report_to_json(const InterventionReport& report);

struct ConceptIntervention {
  AttributionMap before;
  AttributionMap after;
  Tensor region;  // H x W
  double negative_before = 0.0;
  double negative_after = 0.0;
  double delta = 0.0;
};

/// Target attribution before and after writing `concept_patch` at (row, col),
/// with the change in negative attribution mass inside the patch footprint.
ConceptIntervention controlled_concept_intervention(const Model& model, const Tensor& image,
                                                    const Tensor& concept_patch, int row, int col, int target,
                                                    const AttributionConfig& config = {});

}  // namespace absentia
