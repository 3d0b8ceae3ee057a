#include "absentia/intervention.hpp"

#include "absentia/parallel.hpp"
#include "absentia/random.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace absentia {

Tensor insert_patch(const Tensor& image, const Tensor& patch, int row, int col) {
  if (image.rank() != 3 || patch.rank() != 3) throw std::invalid_argument("insert_patch expects C x H x W tensors");
  if (patch.dim(0) != image.dim(0)) throw std::invalid_argument("insert_patch: channel mismatch");
  const Index ph = patch.dim(1), pw = patch.dim(2);
  if (row < 0 || col < 0 || row + ph > image.dim(1) || col + pw > image.dim(2))
    throw std::invalid_argument("insert_patch: patch " + shape_str(patch.shape()) + " does not fit at (" +
                                std::to_string(row) + ", " + std::to_string(col) + ") in " +
                                shape_str(image.shape()));
  Tensor out = image;
  for (Index c = 0; c < patch.dim(0); ++c)
    for (Index y = 0; y < ph; ++y)
      for (Index x = 0; x < pw; ++x) out.at3(c, row + y, col + x) = patch.at3(c, y, x);
  return out;
}

namespace {

std::pair<int, int> corner_origin(Index h, Index w, Index ph, Index pw, Corner corner) {
  if (ph > h || pw > w) throw std::invalid_argument("patch larger than image");
  const bool bottom = corner == Corner::bottom_left || corner == Corner::bottom_right;
  const bool right = corner == Corner::top_right || corner == Corner::bottom_right;
  return {bottom ? static_cast<int>(h - ph) : 0, right ? static_cast<int>(w - pw) : 0};
}

}  // namespace

Tensor insert_patch(const Tensor& image, const Tensor& patch, Corner corner) {
  if (image.rank() != 3 || patch.rank() != 3) throw std::invalid_argument("insert_patch expects C x H x W tensors");
  const auto [row, col] = corner_origin(image.dim(1), image.dim(2), patch.dim(1), patch.dim(2), corner);
  return insert_patch(image, patch, row, col);
}

Corner random_corner(std::uint64_t seed) { return static_cast<Corner>(Rng(seed).below(4)); }

double boundary_discontinuity(const Tensor& image, int patch_h, int patch_w, Corner corner) {
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const auto [row, col] = corner_origin(h, w, patch_h, patch_w, corner);
  double total = 0.0;
  Index count = 0;
  // Horizontal edge facing the image interior.
  if (patch_h < h) {
    const Index inner = row == 0 ? patch_h - 1 : row;
    const Index outer = row == 0 ? patch_h : row - 1;
    for (Index k = 0; k < c; ++k)
      for (Index x = col; x < col + patch_w; ++x, ++count) total += std::abs(image.at3(k, inner, x) - image.at3(k, outer, x));
  }
  if (patch_w < w) {
    const Index inner = col == 0 ? patch_w - 1 : col;
    const Index outer = col == 0 ? patch_w : col - 1;
    for (Index k = 0; k < c; ++k)
      for (Index y = row; y < row + patch_h; ++y, ++count) total += std::abs(image.at3(k, y, inner) - image.at3(k, y, outer));
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

// ---- t-test --------------------------------------------------------------------------

namespace {

// Continued fraction for the incomplete beta function (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 100000; ++m) {
    const double m2 = 2.0 * m;
    double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < eps) return h;
  }
  throw std::runtime_error("incomplete beta: continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw std::invalid_argument("incomplete_beta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument("incomplete_beta: x outside [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(log_front) * beta_continued_fraction(a, b, x) / a;
  return 1.0 - std::exp(log_front) * beta_continued_fraction(b, a, 1.0 - x) / b;
}

TTest t_test_ind(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("t_test_ind: each sample needs at least 2 values");
  const auto moments = [](const std::vector<double>& v) {
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::pair{mean, ss};
  };
  const auto [ma, ssa] = moments(a);
  const auto [mb, ssb] = moments(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const int df = static_cast<int>(a.size() + b.size() - 2);
  const double pooled = (ssa + ssb) / df;
  if (!(pooled > 0.0)) throw std::domain_error("t_test_ind: zero pooled variance");
  TTest out;
  out.df = df;
  out.t = (ma - mb) / std::sqrt(pooled * (1.0 / na + 1.0 / nb));
  out.p = incomplete_beta(0.5 * df, 0.5, df / (df + out.t * out.t));
  return out;
}

// ---- intervention protocol --------------------------------------------------------------

void InterventionConfig::validate() const {
  if (k_images < 2) throw std::invalid_argument("intervention: k_images must be at least 2");
  if (patch < 1) throw std::invalid_argument("intervention: patch size must be at least 1");
  if (stride < 1) throw std::invalid_argument("intervention: stride must be at least 1");
  if (candidates < 1) throw std::invalid_argument("intervention: need at least one candidate patch");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("intervention: alpha outside (0, 1)");
  if (inhibitor_patches && inhibitor_patches->empty())
    throw std::invalid_argument("intervention: empty inhibitor patch list");
}

namespace {

constexpr std::uint64_t kCornerStream = 0x636f726e;
constexpr std::uint64_t kRandomStream = 0x72616e64;

std::optional<TTest> try_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  try {
    return t_test_ind(a, b);
  } catch (const std::domain_error&) {
    return std::nullopt;
  }
}

ConditionResult evaluate_condition(const Model& model, const NeuronRef& neuron, const std::vector<Tensor>& images,
                                   const std::vector<double>& boundaries) {
  ConditionResult r;
  const Tensor values = neuron_values(model, stack(images), neuron);
  r.activations.assign(values.data().begin(), values.data().end());
  r.mean = values.data().mean();
  r.boundary = boundaries.empty() ? 0.0
                                  : std::accumulate(boundaries.begin(), boundaries.end(), 0.0) /
                                        static_cast<double>(boundaries.size());
  return r;
}

}  // namespace

ChannelIntervention intervene_channel(const Model& model, const std::vector<Sample>& samples, const NeuronRef& neuron,
                                      const InterventionConfig& config) {
  config.validate();
  neuron.validate(model.spec);
  if (static_cast<Index>(samples.size()) < config.k_images)
    throw std::invalid_argument("intervention: dataset has " + std::to_string(samples.size()) + " images, need " +
                                std::to_string(config.k_images));
  if (samples.size() < 2) throw std::invalid_argument("intervention: random patches need a second image");

  ChannelIntervention out;
  out.neuron = neuron;
  std::vector<std::size_t> index_of_id;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto id = static_cast<std::size_t>(samples[i].id);
    if (id >= index_of_id.size()) index_of_id.resize(id + 1, samples.size());
    index_of_id[id] = i;
  }

  std::vector<Tensor> least, most;
  if (config.inhibitor_patches) {
    least = *config.inhibitor_patches;
  } else {
    out.least_patches = extreme_patches(model, samples, neuron, config.patch, config.stride, config.candidates,
                                        PatchMode::min);
    for (const PatchRecord& r : out.least_patches)
      least.push_back(crop(samples[index_of_id[static_cast<std::size_t>(r.sample_id)]].image, r.row, r.col, r.size));
  }
  out.most_patches =
      extreme_patches(model, samples, neuron, config.patch, config.stride, config.candidates, PatchMode::max);
  for (const PatchRecord& r : out.most_patches)
    most.push_back(crop(samples[index_of_id[static_cast<std::size_t>(r.sample_id)]].image, r.row, r.col, r.size));

  Rng rng(mix_seed(config.seed, kRandomStream, static_cast<std::uint64_t>(neuron.channel)));
  std::vector<Tensor> none, random, with_least, with_most;
  std::vector<double> b_random, b_least, b_most;
  for (const ImageActivation& top : top_images(model, samples, neuron, config.k_images)) {
    const std::size_t i = out.image_ids.size();
    const Tensor& image = samples[index_of_id[static_cast<std::size_t>(top.sample_id)]].image;
    const Corner corner = random_corner(mix_seed(config.seed, kCornerStream, static_cast<std::uint64_t>(top.sample_id)));
    out.image_ids.push_back(top.sample_id);
    out.corners.push_back(static_cast<int>(corner));

    // Random control: a window cut from a different image.
    std::size_t other = static_cast<std::size_t>(rng.below(samples.size() - 1));
    if (other >= index_of_id[static_cast<std::size_t>(top.sample_id)]) ++other;
    const Tensor& source = samples[other].image;
    const Tensor& inhibitor = least[i % least.size()];
    const int ph = static_cast<int>(inhibitor.dim(1)), pw = static_cast<int>(inhibitor.dim(2));
    if (ph != pw && !config.inhibitor_patches) throw std::logic_error("intervention: non-square search patch");
    const int size = config.patch;
    if (size > source.dim(1) || size > source.dim(2)) throw std::invalid_argument("intervention: patch larger than image");
    const int row = static_cast<int>(rng.below(static_cast<std::uint64_t>(source.dim(1) - size + 1)));
    const int col = static_cast<int>(rng.below(static_cast<std::uint64_t>(source.dim(2) - size + 1)));

    none.push_back(image);
    random.push_back(insert_patch(image, crop(source, row, col, size), corner));
    with_least.push_back(insert_patch(image, inhibitor, corner));
    with_most.push_back(insert_patch(image, most[i % most.size()], corner));
    b_random.push_back(boundary_discontinuity(random.back(), size, size, corner));
    b_least.push_back(boundary_discontinuity(with_least.back(), ph, pw, corner));
    b_most.push_back(boundary_discontinuity(with_most.back(), size, size, corner));
  }

  out.none = evaluate_condition(model, neuron, none, {});
  out.random = evaluate_condition(model, neuron, random, b_random);
  out.least = evaluate_condition(model, neuron, with_least, b_least);
  out.most = evaluate_condition(model, neuron, with_most, b_most);
  for (ConditionResult* c : {&out.none, &out.random, &out.least, &out.most}) c->drop = out.none.mean - c->mean;
  out.least_vs_random = try_t_test(out.least.activations, out.random.activations);
  out.most_vs_random = try_t_test(out.most.activations, out.random.activations);
  out.inhibited = out.least_vs_random && out.least_vs_random->p < config.alpha && out.least.mean < out.random.mean;
  return out;
}

InterventionReport run_intervention(const Model& model, const std::vector<Sample>& samples, int layer,
                                    const InterventionConfig& config) {
  config.validate();
  InterventionReport report;
  report.layer = layer;
  report.config = config;
  const Index channels = model.spec.channels_after(layer);
  report.channels.resize(static_cast<std::size_t>(channels));
  parallel_for(report.channels.size(), [&](std::size_t c) {
    report.channels[c] = intervene_channel(model, samples, NeuronRef{layer, static_cast<Index>(c), std::nullopt}, config);
  });
  report.significant_fraction = significant_inhibition_fraction(report);
  return report;
}

double significant_inhibition_fraction(const InterventionReport& report) {
  if (report.channels.empty()) throw std::invalid_argument("intervention report has no channels");
  double hits = 0.0;
  for (const ChannelIntervention& c : report.channels) hits += c.inhibited;
  return hits / static_cast<double>(report.channels.size());
}

double significant_inhibition_fraction(const Model& model, const std::vector<Sample>& samples, int layer,
                                       const InterventionConfig& config) {
  return run_intervention(model, samples, layer, config).significant_fraction;
}

namespace {

json condition_json(const ConditionResult& c) {
  return {{"activations", c.activations}, {"mean", c.mean}, {"drop", c.drop}, {"boundary", c.boundary}};
}

json t_test_json(const std::optional<TTest>& t) {
  if (!t) return {{"defined", false}};
  return {{"defined", true}, {"t", t->t}, {"p", t->p}, {"df", t->df}};
}

json patches_json(const std::vector<PatchRecord>& patches) {
  json out = json::array();
  for (const PatchRecord& r : patches)
    out.push_back({{"sample_id", r.sample_id}, {"row", r.row}, {"col", r.col}, {"size", r.size},
                   {"activation", r.activation}, {"rank", r.rank}});
  return out;
}

}  // namespace

json intervention_report_to_json(const InterventionReport& report) {
  json channels = json::array();
  for (const ChannelIntervention& c : report.channels)
    channels.push_back({{"neuron", c.neuron.str()},
                        {"image_ids", c.image_ids},
                        {"corners", c.corners},
                        {"none", condition_json(c.none)},
                        {"random", condition_json(c.random)},
                        {"least", condition_json(c.least)},
                        {"most", condition_json(c.most)},
                        {"least_vs_random", t_test_json(c.least_vs_random)},
                        {"most_vs_random", t_test_json(c.most_vs_random)},
                        {"least_patches", patches_json(c.least_patches)},
                        {"most_patches", patches_json(c.most_patches)},
                        {"inhibited", c.inhibited}});
  const InterventionConfig& cfg = report.config;
  return {{"layer", report.layer},
          {"config",
           {{"k_images", cfg.k_images},
            {"patch", cfg.patch},
            {"stride", cfg.stride},
            {"candidates", cfg.candidates},
            {"seed", cfg.seed},
            {"alpha", cfg.alpha},
            {"inhibitor_patches", cfg.inhibitor_patches ? static_cast<Index>(cfg.inhibitor_patches->size()) : 0}}},
          {"channels", channels},
          {"significant_fraction", report.significant_fraction}};
}

// ---- controlled concept intervention ----------------------------------------------------------

ConceptIntervention controlled_concept_intervention(const Model& model, const Tensor& image,
                                                    const Tensor& concept_patch, int row, int col, int target,
                                                    const AttributionConfig& config) {
  ConceptIntervention out;
  const Tensor modified = insert_patch(image, concept_patch, row, col);
  out.region = Tensor(Shape{image.dim(1), image.dim(2)});
  for (Index y = 0; y < concept_patch.dim(1); ++y)
    for (Index x = 0; x < concept_patch.dim(2); ++x) out.region[(row + y) * image.dim(2) + col + x] = 1.0;
  out.before = integrated_gradients(model, image, target, config);
  out.after = integrated_gradients(model, modified, target, config);
  out.negative_before = negative_mass(out.before.values, out.region);
  out.negative_after = negative_mass(out.after.values, out.region);
  out.delta = out.negative_after - out.negative_before;
  return out;
}

}  // namespace absentia
