#pragma once

// Attribution-prior training against a spurious patch, and evaluation on
// validation splits with the training bias, the inverse bias and no bias.

#include "absentia/attribution.hpp"
#include "absentia/synthdata.hpp"

#include <array>
#include <string>
#include <vector>

namespace absentia {

enum class PriorKind { none, presence, presence_absence };

PriorKind parse_prior_kind(const std::string& text);
std::string to_string(PriorKind kind);

struct PriorConfig {
  PriorKind kind = PriorKind::none;
  double lambda = 0.0;
  int steps = 8;
  IntegrationRule rule = IntegrationRule::midpoint;

  void validate() const;
};

/// Mean over the batch of sum|A(x, t) * P| / (sum P + 1e-5), where A is the
/// IG attribution of output t[n] built with create_graph and P the pixel mask
/// (N x H x W). Samples with an empty mask contribute exactly 0.
Var mask_attribution_penalty(const ModelSpec& spec, std::span<const Var> weights, const Tensor& images,
                             std::span<const int> targets, const Tensor& masks, int steps, IntegrationRule rule);

/// 2 lambda * penalty(t).
Var presence_prior(const ModelSpec& spec, std::span<const Var> weights, const Tensor& images,
                   std::span<const int> labels, const Tensor& masks, const PriorConfig& config);
/// lambda * (penalty(t) + penalty(t')) with t' the other class.
Var presence_absence_prior(const ModelSpec& spec, std::span<const Var> weights, const Tensor& images,
                           std::span<const int> labels, const Tensor& masks, const PriorConfig& config);
/// Dispatches on config.kind; `none` yields an exact 0.
Var attribution_prior(const ModelSpec& spec, std::span<const Var> weights, const Tensor& images,
                      std::span<const int> labels, const Tensor& masks, const PriorConfig& config);

/// Training hook that adds the prior for batches carrying masks.
ExtraLoss prior_loss(const ModelSpec& spec, const PriorConfig& config);

struct SplitEvaluation {
  std::string split;
  std::array<double, 2> class_accuracy{};
  double average = 0.0;  // unweighted mean of the class accuracies
  std::optional<double> attr;  // mean mask-relative target attribution over masked samples
  Index masked = 0;
};

struct BiasEvalReport {
  std::vector<SplitEvaluation> splits;

  const SplitEvaluation& at(const std::string& split) const;
};

struct NamedSplit {
  std::string name;
  std::vector<Sample> samples;
};

BiasEvalReport evaluate_bias_splits(const Model& model, const std::vector<NamedSplit>& splits, int attr_steps = 64);

struct DebiasConfig {
  PriorKind prior = PriorKind::none;
  std::vector<double> grid{1, 10, 100, 1000, 10000};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  int prior_steps = 8;
  IntegrationRule rule = IntegrationRule::midpoint;
  int attr_steps = 64;
  /// Trainings per (lambda, seed) when a run ends as a constant predictor.
  int max_attempts = 3;
  TrainConfig train{.lr = 1e-3, .weight_decay = 1e-4, .epochs = 20, .batch_size = 128, .seed = 0, .extra_loss = {}};

  void validate() const;
};

struct DebiasRun {
  double lambda = 0.0;
  std::uint64_t seed = 0;
  Checkpoint checkpoint;
  BiasEvalReport eval;
};

struct DebiasResult {
  PriorKind prior = PriorKind::none;
  std::vector<DebiasRun> runs;  // grid-major, then seeds
  double selected_lambda = 0.0;
  /// Runs at the selected lambda, in seed order (failed runs excluded).
  std::vector<const DebiasRun*> selected() const;
};

/// Trains build_bias_model(config.seed) on `data`. A run that ends predicting
/// one class for every training image is retrained from a seed derived from
/// config.seed, up to `max_attempts` trainings; meta.extra["restarts"] counts
/// the retries.
Checkpoint train_bias_model(const LabeledData& data, const TrainConfig& config, int max_attempts = 3);

/// Trains the whole (lambda, seed) grid for one prior kind and selects lambda
/// by the mean no-bias validation accuracy. Runs are spread over the worker
/// threads. `validation` must contain a split named "none".
DebiasResult train_debiased(const std::vector<Sample>& train, const std::vector<NamedSplit>& validation,
                            const DebiasConfig& config);

double median(std::vector<double> values);

json bias_eval_to_json(const BiasEvalReport& report);
json debias_result_to_json(const DebiasResult& result);

/// One row per method: per split and class accuracy, Avg. and Attr. (medians
/// over the selected runs).
std::string bias_table_csv(const std::vector<std::pair<std::string, const DebiasResult*>>& methods);

}  // namespace absentia
