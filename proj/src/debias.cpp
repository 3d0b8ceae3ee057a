#include "absentia/debias.hpp"

#include "absentia/parallel.hpp"
#include "absentia/random.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace absentia {

PriorKind parse_prior_kind(const std::string& text) {
  if (text == "none") return PriorKind::none;
  if (text == "presence") return PriorKind::presence;
  if (text == "presence_absence") return PriorKind::presence_absence;
  throw std::invalid_argument("unknown prior '" + text + "'");
}

std::string to_string(PriorKind kind) {
  switch (kind) {
    case PriorKind::none: return "none";
    case PriorKind::presence: return "presence";
    case PriorKind::presence_absence: return "presence_absence";
  }
  return "?";
}

void PriorConfig::validate() const {
  if (kind != PriorKind::none && !(lambda > 0.0)) throw std::invalid_argument("prior weight must be positive");
  if (steps < 1) throw std::invalid_argument("prior attribution needs at least one step");
}

namespace {

constexpr double kMaskEps = 1e-5;
constexpr double kAbsEps = 1e-12;

Tensor gather_rows(const Tensor& x, const std::vector<Index>& rows) {
  Shape s = x.shape();
  const Index inner = x.numel() / s[0];
  s[0] = static_cast<Index>(rows.size());
  Tensor out(s);
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.data().segment(static_cast<Index>(i) * inner, inner) = x.data().segment(rows[i] * inner, inner);
  return out;
}

bool constant_predictor(const Model& model, const LabeledData& data) {
  const std::vector<int> pred = argmax_rows(predict(model, data.images));
  return std::all_of(pred.begin(), pred.end(), [&](int p) { return p == pred.front(); });
}

}  // namespace

Var mask_attribution_penalty(const ModelSpec& spec, std::span<const Var> weights, const Tensor& images,
                             std::span<const int> targets, const Tensor& masks, int steps, IntegrationRule rule) {
  const Index n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (masks.shape() != Shape{n, h, w})
    throw std::invalid_argument("prior mask shape " + shape_str(masks.shape()) + " does not match images " +
                                shape_str(images.shape()));
  if (static_cast<Index>(targets.size()) != n) throw std::invalid_argument("prior: one target per image required");

  std::vector<Index> masked;
  for (Index i = 0; i < n; ++i)
    if (masks.data().segment(i * h * w, h * w).sum() > 0.0) masked.push_back(i);
  if (masked.empty()) return Var::constant(Tensor::scalar(0.0));

  const Index k = static_cast<Index>(masked.size());
  const Tensor x = gather_rows(images, masked);
  std::vector<int> t;
  for (Index i : masked) t.push_back(targets[static_cast<std::size_t>(i)]);
  const IntegrationPath path = integration_path(steps, rule);
  const std::size_t m = path.alphas.size();
  std::vector<int> repeated;
  for (int target : t) repeated.insert(repeated.end(), m, target);

  const BatchScalarFn f = [&](const Var& batch) { return select_outputs(forward(spec, weights, batch), repeated); };
  const Var a = integrated_gradients(f, x, Tensor::zeros_like(x), path, true);
  if (!a.value().data().allFinite()) throw std::domain_error("prior: non-finite attribution");

  // Mask broadcast over channels, pre-divided by each sample's mask size.
  Tensor weight(Shape{k, c, h, w});
  for (Index i = 0; i < k; ++i) {
    const auto p = masks.data().segment(masked[static_cast<std::size_t>(i)] * h * w, h * w);
    const double norm = p.sum() + kMaskEps;
    for (Index ch = 0; ch < c; ++ch) weight.data().segment((i * c + ch) * h * w, h * w) = p / norm;
  }
  // sqrt(a^2 + eps) - sqrt(eps): smooth, and exactly 0 where a is 0.
  const Var abs_a = add_scalar(smooth_abs(a, kAbsEps), -std::sqrt(kAbsEps));
  return scale(sum(mul(abs_a, Var::constant(std::move(weight)))), 1.0 / static_cast<double>(n));
}

Var presence_prior(const ModelSpec& spec, std::span<const Var> weights, const Tensor& images,
                   std::span<const int> labels, const Tensor& masks, const PriorConfig& config) {
  config.validate();
  return scale(mask_attribution_penalty(spec, weights, images, labels, masks, config.steps, config.rule),
               2.0 * config.lambda);
}

Var presence_absence_prior(const ModelSpec& spec, std::span<const Var> weights, const Tensor& images,
                           std::span<const int> labels, const Tensor& masks, const PriorConfig& config) {
  config.validate();
  if (spec.output_channels() != 2) throw std::invalid_argument("presence_absence prior needs a two-output model");
  std::vector<int> other;
  for (int t : labels) other.push_back(1 - t);
  const Var target = mask_attribution_penalty(spec, weights, images, labels, masks, config.steps, config.rule);
  const Var non_target = mask_attribution_penalty(spec, weights, images, other, masks, config.steps, config.rule);
  return scale(add(target, non_target), config.lambda);
}

Var attribution_prior(const ModelSpec& spec, std::span<const Var> weights, const Tensor& images,
                      std::span<const int> labels, const Tensor& masks, const PriorConfig& config) {
  switch (config.kind) {
    case PriorKind::none: return Var::constant(Tensor::scalar(0.0));
    case PriorKind::presence: return presence_prior(spec, weights, images, labels, masks, config);
    case PriorKind::presence_absence: return presence_absence_prior(spec, weights, images, labels, masks, config);
  }
  throw std::logic_error("unhandled prior kind");
}

ExtraLoss prior_loss(const ModelSpec& spec, const PriorConfig& config) {
  config.validate();
  if (config.kind == PriorKind::none) return {};
  return [spec, config](std::span<const Var> weights, const LabeledData& batch) -> Var {
    if (!batch.masks) throw std::invalid_argument("attribution prior needs bias masks");
    return attribution_prior(spec, weights, batch.images, batch.labels, *batch.masks, config);
  };
}

// ---- evaluation ---------------------------------------------------------------------------

const SplitEvaluation& BiasEvalReport::at(const std::string& split) const {
  for (const SplitEvaluation& s : splits)
    if (s.split == split) return s;
  throw std::out_of_range("no split named '" + split + "'");
}

BiasEvalReport evaluate_bias_splits(const Model& model, const std::vector<NamedSplit>& splits, int attr_steps) {
  BiasEvalReport report;
  for (const NamedSplit& split : splits) {
    if (split.samples.empty()) throw std::invalid_argument("evaluate_bias_splits: split '" + split.name + "' is empty");
    const LabeledData data = to_labeled(split.samples);
    const std::vector<int> pred = argmax_rows(predict(model, data.images));
    SplitEvaluation e;
    e.split = split.name;
    std::array<double, 2> hits{}, counts{};
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const int label = data.labels[i];
      if (label < 0 || label > 1) throw std::invalid_argument("evaluate_bias_splits: labels must be 0 or 1");
      counts[static_cast<std::size_t>(label)] += 1;
      hits[static_cast<std::size_t>(label)] += pred[i] == label;
    }
    for (std::size_t c = 0; c < 2; ++c) e.class_accuracy[c] = counts[c] > 0 ? hits[c] / counts[c] : 0.0;
    e.average = 0.5 * (e.class_accuracy[0] + e.class_accuracy[1]);

    std::vector<Index> masked;
    for (std::size_t i = 0; i < split.samples.size(); ++i) {
      const auto& mask = split.samples[i].bias_mask;
      if (mask && mask->data().sum() > 0.0) masked.push_back(static_cast<Index>(i));
    }
    e.masked = static_cast<Index>(masked.size());
    if (!masked.empty()) {
      const Tensor images = gather_rows(data.images, masked);
      std::vector<int> targets;
      for (Index i : masked) targets.push_back(data.labels[static_cast<std::size_t>(i)]);
      AttributionConfig cfg;
      cfg.steps = attr_steps;
      const BatchAttribution a = attribute_outputs(model, images, targets, cfg);
      const Index inner = a.values.numel() / a.values.dim(0);
      double total = 0.0;
      for (std::size_t j = 0; j < masked.size(); ++j) {
        const Tensor values(Shape{images.dim(1), images.dim(2), images.dim(3)},
                            a.values.data().segment(static_cast<Index>(j) * inner, inner));
        total += mask_relative_attribution(values, *split.samples[static_cast<std::size_t>(masked[j])].bias_mask);
      }
      e.attr = total / static_cast<double>(masked.size());
    }
    report.splits.push_back(std::move(e));
  }
  return report;
}

// ---- grid training --------------------------------------------------------------------------

void DebiasConfig::validate() const {
  if (grid.empty() && prior != PriorKind::none) throw std::invalid_argument("debias: empty lambda grid");
  if (prior != PriorKind::none)
    for (double l : grid)
      if (!(l > 0.0)) throw std::invalid_argument("debias: lambda values must be positive");
  if (seeds.empty()) throw std::invalid_argument("debias: no seeds");
  if (prior_steps < 1 || attr_steps < 1) throw std::invalid_argument("debias: attribution steps must be positive");
  if (max_attempts < 1) throw std::invalid_argument("debias: max_attempts must be at least 1");
}

std::vector<const DebiasRun*> DebiasResult::selected() const {
  std::vector<const DebiasRun*> out;
  for (const DebiasRun& r : runs)
    if (r.lambda == selected_lambda && !r.checkpoint.meta.failed) out.push_back(&r);
  return out;
}

Checkpoint train_bias_model(const LabeledData& data, const TrainConfig& config, int max_attempts) {
  if (max_attempts < 1) throw std::invalid_argument("train_bias_model: max_attempts must be at least 1");
  // A bias-free ReLU net can die on every sample of one class and settle as
  // a constant predictor; such runs restart from a derived seed.
  Checkpoint ck;
  int restarts = 0;
  for (; restarts < max_attempts; ++restarts) {
    TrainConfig tc = config;
    tc.seed = restarts == 0 ? config.seed : mix_seed(config.seed, 0x72657472, static_cast<std::uint64_t>(restarts));
    ck = absentia::train(build_bias_model(tc.seed), data, tc);
    if (ck.meta.failed || !constant_predictor(ck.model, data)) break;
  }
  ck.meta.extra["restarts"] = std::min(restarts, max_attempts - 1);
  return ck;
}

DebiasResult train_debiased(const std::vector<Sample>& train, const std::vector<NamedSplit>& validation,
                            const DebiasConfig& config) {
  config.validate();
  if (train.empty()) throw std::invalid_argument("train_debiased: empty training set");
  if (std::none_of(validation.begin(), validation.end(), [](const NamedSplit& s) { return s.name == "none"; }))
    throw std::invalid_argument("train_debiased: lambda selection needs a 'none' validation split");
  const LabeledData data = to_labeled(train);
  const std::vector<double> grid = config.prior == PriorKind::none ? std::vector<double>{0.0} : config.grid;

  DebiasResult result;
  result.prior = config.prior;
  for (double lambda : grid)
    for (std::uint64_t seed : config.seeds) result.runs.push_back({lambda, seed, {}, {}});

  parallel_for(result.runs.size(), [&](std::size_t i) {
    DebiasRun& run = result.runs[i];
    TrainConfig tc = config.train;
    tc.seed = run.seed;
    if (config.prior != PriorKind::none)
      tc.extra_loss = prior_loss(build_bias_model(0).spec, {config.prior, run.lambda, config.prior_steps, config.rule});
    run.checkpoint = train_bias_model(data, tc, config.max_attempts);
    run.checkpoint.meta.extra["prior"] = to_string(config.prior);
    run.checkpoint.meta.extra["lambda"] = run.lambda;
    if (!run.checkpoint.meta.failed) run.eval = evaluate_bias_splits(run.checkpoint.model, validation, config.attr_steps);
  });

  // Mean no-bias accuracy per lambda over the runs that finished.
  double best = -1.0;
  for (double lambda : grid) {
    double total = 0.0;
    int count = 0;
    for (const DebiasRun& r : result.runs)
      if (r.lambda == lambda && !r.checkpoint.meta.failed) {
        total += r.eval.at("none").average;
        ++count;
      }
    if (count > 0 && total / count > best) {
      best = total / count;
      result.selected_lambda = lambda;
    }
  }
  if (best < 0.0) throw std::runtime_error("train_debiased: every run failed");
  return result;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

json bias_eval_to_json(const BiasEvalReport& report) {
  json out = json::object();
  for (const SplitEvaluation& s : report.splits) {
    json j = {{"class_accuracy", s.class_accuracy}, {"average", s.average}, {"masked", s.masked}};
    j["attr"] = s.attr ? json(*s.attr) : json(nullptr);
    out[s.split] = j;
  }
  return out;
}

json debias_result_to_json(const DebiasResult& result) {
  json runs = json::array();
  for (const DebiasRun& r : result.runs) {
    json j = {{"lambda", r.lambda},
              {"seed", r.seed},
              {"failed", r.checkpoint.meta.failed},
              {"epoch_losses", r.checkpoint.meta.epoch_losses}};
    if (r.checkpoint.meta.failed)
      j["failure"] = r.checkpoint.meta.failure;
    else
      j["eval"] = bias_eval_to_json(r.eval);
    runs.push_back(j);
  }
  return {{"prior", to_string(result.prior)}, {"selected_lambda", result.selected_lambda}, {"runs", runs}};
}

std::string bias_table_csv(const std::vector<std::pair<std::string, const DebiasResult*>>& methods) {
  static const std::vector<std::string> kSplits{"training", "inverse", "none"};
  std::ostringstream csv;
  csv << "method,lambda";
  for (const std::string& s : kSplits) csv << ',' << s << "_class0," << s << "_class1," << s << "_avg," << s << "_attr";
  csv << '\n' << std::setprecision(6);
  for (const auto& [name, result] : methods) {
    const std::vector<const DebiasRun*> runs = result->selected();
    if (runs.empty()) throw std::invalid_argument("bias table: no successful runs for " + name);
    csv << name << ',' << result->selected_lambda;
    for (const std::string& split : kSplits) {
      std::vector<double> c0, c1, avg, attr;
      for (const DebiasRun* r : runs) {
        const SplitEvaluation& e = r->eval.at(split);
        c0.push_back(e.class_accuracy[0]);
        c1.push_back(e.class_accuracy[1]);
        avg.push_back(e.average);
        if (e.attr) attr.push_back(*e.attr);
      }
      csv << ',' << median(c0) << ',' << median(c1) << ',' << median(avg) << ',';
      if (!attr.empty()) csv << median(attr);
    }
    csv << '\n';
  }
  return csv.str();
}

}  // namespace absentia
