#include "absentia/featviz.hpp"

#include "absentia/random.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <tuple>

namespace absentia {

std::vector<ImageActivation> top_images(const Model& model, const std::vector<Sample>& samples,
                                        const NeuronRef& neuron, Index k) {
  if (samples.empty()) throw std::invalid_argument("top_images: empty dataset");
  if (k < 0 || k > static_cast<Index>(samples.size()))
    throw std::invalid_argument("top_images: k exceeds the dataset size");
  const Tensor values = neuron_values(model, to_labeled(samples).images, neuron);
  std::vector<ImageActivation> all;
  for (std::size_t i = 0; i < samples.size(); ++i) all.push_back({samples[i].id, values[static_cast<Index>(i)]});
  std::stable_sort(all.begin(), all.end(), [](const ImageActivation& a, const ImageActivation& b) {
    return a.activation != b.activation ? a.activation > b.activation : a.sample_id < b.sample_id;
  });
  all.resize(static_cast<std::size_t>(k));
  return all;
}

PatchMode parse_patch_mode(const std::string& text) {
  if (text == "max") return PatchMode::max;
  if (text == "min") return PatchMode::min;
  throw std::invalid_argument("unknown patch mode '" + text + "'");
}

std::string to_string(PatchMode mode) { return mode == PatchMode::max ? "max" : "min"; }

Tensor crop(const Tensor& image, int row, int col, int size) {
  if (image.rank() != 3) throw std::invalid_argument("crop expects a C x H x W image");
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (size < 0 || row < 0 || col < 0 || row + size > h || col + size > w)
    throw std::invalid_argument("crop window outside the image");
  Tensor out(Shape{c, size, size});
  for (Index k = 0; k < c; ++k)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) out.at3(k, y, x) = image.at3(k, row + y, col + x);
  return out;
}

namespace {

constexpr std::size_t kPatchBatch = 1024;

}  // namespace

std::vector<PatchRecord> extreme_patches(const Model& model, const std::vector<Sample>& samples,
                                         const NeuronRef& neuron, int size, int stride, Index k, PatchMode mode) {
  if (stride < 1) throw std::invalid_argument("extreme_patches: stride must be at least 1");
  if (size < 1) throw std::invalid_argument("extreme_patches: patch size must be at least 1");
  if (k < 0) throw std::invalid_argument("extreme_patches: negative k");
  std::vector<PatchRecord> records;
  std::vector<Tensor> pending;
  auto flush = [&] {
    if (pending.empty()) return;
    const Tensor values = neuron_values(model, stack(pending), neuron);
    const std::size_t first = records.size() - pending.size();
    for (std::size_t i = 0; i < pending.size(); ++i) records[first + i].activation = values[static_cast<Index>(i)];
    pending.clear();
  };
  for (const Sample& s : samples) {
    const int h = static_cast<int>(s.image.dim(1)), w = static_cast<int>(s.image.dim(2));
    if (size > h || size > w) continue;
    for (int row = 0; row + size <= h; row += stride)
      for (int col = 0; col + size <= w; col += stride) {
        records.push_back({s.id, row, col, size, 0.0, 0});
        pending.push_back(crop(s.image, row, col, size));
        if (pending.size() == kPatchBatch) flush();
      }
  }
  flush();
  if (records.empty()) throw std::invalid_argument("extreme_patches: no valid window positions");

  const auto key = [](const PatchRecord& r) { return std::tuple(r.sample_id, r.row, r.col); };
  std::sort(records.begin(), records.end(), [&](const PatchRecord& a, const PatchRecord& b) {
    if (a.activation != b.activation)
      return mode == PatchMode::max ? a.activation > b.activation : a.activation < b.activation;
    return key(a) < key(b);
  });
  if (static_cast<Index>(records.size()) > k) records.resize(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < records.size(); ++i) records[i].rank = static_cast<int>(i);
  return records;
}

SynthesisResult minimize_input(const Model& model, const NeuronRef& neuron, const Shape& shape,
                               const SynthesisConfig& config) {
  if (config.steps < 1) throw std::invalid_argument("minimize_input: steps must be at least 1");
  if (shape.size() != 3) throw std::invalid_argument("minimize_input: shape must be C x H x W");
  neuron.validate(model.spec);
  Rng rng(config.seed);
  Shape batch_shape{1};
  batch_shape.insert(batch_shape.end(), shape.begin(), shape.end());
  Tensor x(batch_shape);
  for (Index i = 0; i < x.numel(); ++i) x[i] = rng.uniform();

  const std::vector<Var> weights = model.constants();
  const double sign = config.maximize ? 1.0 : -1.0;
  SynthesisResult out;
  GradModeGuard recording(true);
  for (int step = 0; step <= config.steps; ++step) {
    const Var input = Var::param(x);
    const Var activation = neuron_activation(model.spec, weights, input, neuron);
    out.trace.push_back(activation.item());
    if (step == config.steps) break;
    const Tensor g = grad(sum(activation), input, {.allow_unused = true}).value();
    const double largest = g.data().abs().maxCoeff();
    if (largest == 0.0) continue;
    x.data() = (x.data() + sign * config.lr / largest * g.data()).max(0.0).min(1.0);
  }
  out.input = x.reshaped(shape);
  return out;
}

double direction_activation(const Model& model, const Tensor& x, int layer, const std::vector<double>& v) {
  const NeuronRef neuron{layer, 0, v};
  neuron.validate(model.spec);
  Shape s{1};
  s.insert(s.end(), x.shape().begin(), x.shape().end());
  return neuron_values(model, x.reshaped(s), neuron).item();
}

}  // namespace absentia
