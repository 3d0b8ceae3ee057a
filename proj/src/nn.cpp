#include "absentia/nn.hpp"

#include "absentia/random.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace absentia {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

constexpr Index kPredictChunk = 512;

}  // namespace

// ---- spec ---------------------------------------------------------------------

void ModelSpec::validate() const {
  if (layers.empty()) throw std::invalid_argument("model '" + name + "' has no layers");
  std::optional<Index> channels;
  bool pooled = false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string where = "model '" + name + "' layer " + std::to_string(i);
    if (const auto* conv = std::get_if<Conv2d>(&layers[i])) {
      if (pooled) throw std::invalid_argument(where + ": conv after global pooling");
      if (conv->out_channels < 1 || conv->in_channels < 1 || conv->kernel_h < 1 || conv->kernel_w < 1)
        throw std::invalid_argument(where + ": non-positive conv extent");
      if (channels && *channels != conv->in_channels)
        throw std::invalid_argument(where + ": expects " + std::to_string(conv->in_channels) +
                                    " channels, receives " + std::to_string(*channels));
      channels = conv->out_channels;
    } else if (std::holds_alternative<GlobalAvgPool>(layers[i])) {
      if (pooled) throw std::invalid_argument(where + ": pooled twice");
      pooled = true;
    }
  }
  if (!channels) throw std::invalid_argument("model '" + name + "' has no conv layer");
}

Index ModelSpec::input_channels() const {
  for (const Layer& layer : layers)
    if (const auto* conv = std::get_if<Conv2d>(&layer)) return conv->in_channels;
  throw std::invalid_argument("model has no conv layer");
}

Index ModelSpec::output_channels() const { return channels_after(static_cast<int>(layers.size()) - 1); }

Index ModelSpec::channels_after(int layer) const {
  if (layer < 0 || layer >= static_cast<int>(layers.size()))
    throw std::invalid_argument("layer index " + std::to_string(layer) + " out of range");
  Index channels = input_channels();
  for (int i = 0; i <= layer; ++i)
    if (const auto* conv = std::get_if<Conv2d>(&layers[static_cast<std::size_t>(i)])) channels = conv->out_channels;
  return channels;
}

int ModelSpec::weight_index(int layer) const {
  int index = 0;
  for (int i = 0; i < static_cast<int>(layers.size()); ++i) {
    if (!std::holds_alternative<Conv2d>(layers[static_cast<std::size_t>(i)])) continue;
    if (i == layer) return index;
    ++index;
  }
  return -1;
}

std::vector<int> ModelSpec::conv_layers() const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(layers.size()); ++i)
    if (std::holds_alternative<Conv2d>(layers[static_cast<std::size_t>(i)])) out.push_back(i);
  return out;
}

std::vector<Var> Model::parameters() const {
  std::vector<Var> out;
  std::size_t k = 0;
  for (const Layer& layer : spec.layers)
    if (const auto* conv = std::get_if<Conv2d>(&layer)) out.emplace_back(weights.at(k++), conv->trainable);
  return out;
}

std::vector<Var> Model::constants() const {
  std::vector<Var> out;
  for (const Tensor& w : weights) out.push_back(Var::constant(w));
  return out;
}

void NeuronRef::validate(const ModelSpec& spec) const {
  if (layer < 0 || layer >= static_cast<int>(spec.layers.size()))
    throw std::invalid_argument("neuron " + str() + ": invalid layer index");
  const Index width = spec.channels_after(layer);
  if (direction) {
    if (static_cast<Index>(direction->size()) != width)
      throw std::invalid_argument("neuron " + str() + ": direction has " + std::to_string(direction->size()) +
                                  " entries, layer has " + std::to_string(width) + " channels");
    double norm2 = 0.0;
    for (double v : *direction) norm2 += v * v;
    if (std::abs(std::sqrt(norm2) - 1.0) > 1e-9)
      throw std::invalid_argument("neuron " + str() + ": direction must have unit norm");
  } else if (channel < 0 || channel >= width) {
    throw std::invalid_argument("neuron " + str() + ": channel out of range");
  }
}

std::string NeuronRef::str() const {
  return std::to_string(layer) + ":" + (direction ? std::string("v") : std::to_string(channel));
}

NeuronRef NeuronRef::parse(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw std::invalid_argument("neuron must be layer:channel, got '" + text + "'");
  NeuronRef ref;
  ref.layer = std::stoi(text.substr(0, colon));
  ref.channel = std::stol(text.substr(colon + 1));
  return ref;
}

// ---- forward --------------------------------------------------------------------

Var forward_range(const ModelSpec& spec, std::span<const Var> weights, const Var& x, int first, int last) {
  if (first < 0 || last >= static_cast<int>(spec.layers.size()) || first > last + 1)
    throw std::invalid_argument("forward_range: bad layer range");
  Var h = x;
  int w = 0;
  for (int i = 0; i < first; ++i)
    if (std::holds_alternative<Conv2d>(spec.layers[static_cast<std::size_t>(i)])) ++w;
  for (int i = first; i <= last; ++i) {
    std::visit(Overloaded{
                   [&](const Conv2d&) { h = conv2d(h, weights[static_cast<std::size_t>(w++)]); },
                   [&](const Relu&) { h = relu(h); },
                   [&](const GlobalAvgPool&) { h = global_average_pool(h); },
               },
               spec.layers[static_cast<std::size_t>(i)]);
  }
  return h;
}

Var neuron_activation(const ModelSpec& spec, std::span<const Var> weights, const Var& x, const NeuronRef& neuron) {
  neuron.validate(spec);
  Var z = forward_range(spec, weights, x, 0, neuron.layer);
  if (z.value().rank() == 4) z = global_average_pool(z);
  const Index n = z.shape()[0], c = z.shape()[1];
  Tensor coeff(Shape{n, c});
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < c; ++k)
      coeff[i * c + k] = neuron.direction ? (*neuron.direction)[static_cast<std::size_t>(k)] : (k == neuron.channel);
  // Channel reduction expressed through the spatial reduction: (N,1,C,1) -> (N,1).
  Var projected = reshape(mul(z, Var::constant(std::move(coeff))), {n, 1, c, 1});
  return reshape(spatial_sum(projected), {n});
}

namespace {

template <typename F>
Tensor chunked(const Tensor& x, F f) {
  const Index n = x.dim(0);
  std::vector<Tensor> parts;
  const Index inner = n == 0 ? 0 : x.numel() / n;
  for (Index start = 0; start < n; start += kPredictChunk) {
    const Index count = std::min(kPredictChunk, n - start);
    Shape s = x.shape();
    s[0] = count;
    parts.push_back(f(Tensor(s, x.data().segment(start * inner, count * inner))));
  }
  if (parts.empty()) throw std::invalid_argument("empty batch");
  if (parts.size() == 1) return parts.front();
  Index total = 0;
  for (const Tensor& p : parts) total += p.numel();
  Shape s = parts.front().shape();
  s[0] = n;
  Eigen::ArrayXd data(total);
  Index at = 0;
  for (const Tensor& p : parts) {
    data.segment(at, p.numel()) = p.data();
    at += p.numel();
  }
  return Tensor(s, std::move(data));
}

}  // namespace

Tensor predict(const Model& model, const Tensor& x) {
  NoGradGuard no_grad;
  const std::vector<Var> weights = model.constants();
  return chunked(x, [&](const Tensor& part) { return forward(model.spec, weights, Var::constant(part)).value(); });
}

Tensor neuron_values(const Model& model, const Tensor& x, const NeuronRef& neuron) {
  NoGradGuard no_grad;
  const std::vector<Var> weights = model.constants();
  return chunked(x, [&](const Tensor& part) {
    return neuron_activation(model.spec, weights, Var::constant(part), neuron).value();
  });
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw std::invalid_argument("argmax_rows expects N x K");
  std::vector<int> out(static_cast<std::size_t>(logits.dim(0)));
  const Index k = logits.dim(1);
  for (Index i = 0; i < logits.dim(0); ++i) {
    Index best = 0;
    for (Index j = 1; j < k; ++j)
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

// ---- architectures ------------------------------------------------------------------

Model build_reichardt_model() {
  Model model;
  model.spec.name = "reichardt";
  model.spec.layers = {Conv2d{2, 2, 1, 2, false}, Relu{}, Conv2d{2, 2, 1, 1, false}, GlobalAvgPool{}};
  model.spec.validate();
  // Kernel layout [out][frame][row][dx]. Channel 0 prefers left-to-right
  // motion, channel 1 is its spatial mirror and prefers right-to-left.
  model.weights.push_back(Tensor(Shape{2, 2, 1, 2}, {1, 1, -3, 1,  //
                                                     1, 1, 1, -3}));
  // Output 0 subtracts the two directions, output 1 averages them.
  model.weights.push_back(Tensor(Shape{2, 2, 1, 1}, {1, -1, 0.5, 0.5}));
  return model;
}

void initialize_uniform(Model& model, std::uint64_t seed, double scale) {
  Rng rng(seed);
  model.weights.clear();
  for (const Layer& layer : model.spec.layers) {
    const auto* conv = std::get_if<Conv2d>(&layer);
    if (!conv) continue;
    Tensor w(conv->kernel_shape());
    for (Index i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-scale, scale);
    model.weights.push_back(std::move(w));
  }
}

Model build_toy_model(std::uint64_t seed) {
  Model model;
  model.spec.name = "toy";
  model.spec.layers = {Conv2d{2, 3, 1, 1}, Relu{}, Conv2d{2, 2, 1, 1}, GlobalAvgPool{}};
  model.spec.validate();
  initialize_uniform(model, seed);
  return model;
}

Model build_bias_model(std::uint64_t seed) {
  Model model;
  model.spec.name = "bias";
  model.spec.layers = {Conv2d{8, 3, 3, 3}, Relu{}, Conv2d{8, 8, 3, 3}, Relu{}, Conv2d{2, 8, 1, 1}, GlobalAvgPool{}};
  model.spec.validate();
  initialize_uniform(model, seed);
  return model;
}

// ---- loss and optimizer ----------------------------------------------------------------

Tensor one_hot(const std::vector<int>& labels, Index classes) {
  Tensor t(Shape{static_cast<Index>(labels.size()), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) throw std::invalid_argument("label out of range");
    t[static_cast<Index>(i) * classes + labels[i]] = 1.0;
  }
  return t;
}

Var bce_loss(const Var& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape())
    throw std::invalid_argument("bce_loss: logits " + shape_str(logits.shape()) + " vs targets " +
                                shape_str(targets.shape()));
  if (((targets.data() != 0.0) && (targets.data() != 1.0)).any())
    throw std::invalid_argument("bce_loss: targets must be 0 or 1");
  // -[t log s(l) + (1-t) log(1-s(l))] = softplus(l) - t*l
  return mean(softplus(logits) - logits * Var::constant(targets));
}

AdamState AdamState::zeros_like(const std::vector<Tensor>& params) {
  AdamState state;
  for (const Tensor& p : params) {
    state.m.push_back(Tensor::zeros_like(p));
    state.v.push_back(Tensor::zeros_like(p));
  }
  return state;
}

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               const AdamConfig& config, const std::vector<bool>& frozen) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw std::invalid_argument("adam_step: parameter/gradient/state count mismatch");
  for (const Tensor& g : grads)
    if (!g.all_finite()) throw std::domain_error("adam_step: non-finite gradient");
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!frozen.empty() && frozen[i]) continue;
    Eigen::ArrayXd& p = params[i].data();
    Eigen::ArrayXd g = grads[i].data();
    if (config.decoupled_weight_decay)
      p *= 1.0 - config.lr * config.weight_decay;
    else
      g += config.weight_decay * p;
    state.m[i].data() = config.beta1 * state.m[i].data() + (1.0 - config.beta1) * g;
    state.v[i].data() = config.beta2 * state.v[i].data() + (1.0 - config.beta2) * g.square();
    p -= config.lr * (state.m[i].data() / c1) / ((state.v[i].data() / c2).sqrt() + config.eps);
  }
}

// ---- training ----------------------------------------------------------------------------

LabeledData LabeledData::gather(std::span<const Index> indices) const {
  const Index per_image = images.numel() / std::max<Index>(size(), 1);
  Shape s = images.shape();
  s[0] = static_cast<Index>(indices.size());
  LabeledData out{Tensor(s), {}, std::nullopt};
  Tensor mask_out;
  Index per_mask = 0;
  if (masks) {
    Shape ms = masks->shape();
    ms[0] = s[0];
    mask_out = Tensor(ms);
    per_mask = masks->numel() / std::max<Index>(size(), 1);
  }
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const Index i = indices[j];
    if (i < 0 || i >= size()) throw std::invalid_argument("gather index out of range");
    out.images.data().segment(static_cast<Index>(j) * per_image, per_image) =
        images.data().segment(i * per_image, per_image);
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
    if (masks)
      mask_out.data().segment(static_cast<Index>(j) * per_mask, per_mask) = masks->data().segment(i * per_mask, per_mask);
  }
  if (masks) out.masks = std::move(mask_out);
  return out;
}

Checkpoint train(const Model& init, const LabeledData& data, const TrainConfig& config) {
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (config.batch_size < 1 || config.epochs < 0) throw std::invalid_argument("train: bad batch size or epochs");
  Checkpoint out{init, {}};
  out.meta.seed = config.seed;
  out.meta.epochs = config.epochs;
  out.meta.extra["lr"] = config.lr;
  out.meta.extra["weight_decay"] = config.weight_decay;
  out.meta.extra["decoupled_weight_decay"] = config.decoupled_weight_decay;
  out.meta.extra["batch_size"] = config.batch_size;

  Model& model = out.model;
  std::vector<bool> frozen;
  for (const Layer& layer : model.spec.layers)
    if (const auto* conv = std::get_if<Conv2d>(&layer)) frozen.push_back(!conv->trainable);
  AdamState state = AdamState::zeros_like(model.weights);
  AdamConfig adam{config.lr, config.weight_decay};
  adam.decoupled_weight_decay = config.decoupled_weight_decay;
  const Index classes = model.spec.output_channels();

  Rng rng(config.seed ^ 0x5DEECE66DULL);
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  for (Index i = 0; i < data.size(); ++i) order[static_cast<std::size_t>(i)] = i;

  try {
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      rng.shuffle(order);
      double total = 0.0;
      for (Index start = 0; start < data.size(); start += config.batch_size) {
        const Index count = std::min(config.batch_size, data.size() - start);
        const LabeledData batch = data.gather(std::span<const Index>(order).subspan(static_cast<std::size_t>(start),
                                                                                    static_cast<std::size_t>(count)));
        const std::vector<Var> weights = model.parameters();
        Var loss = bce_loss(forward(model.spec, weights, Var::constant(batch.images)), one_hot(batch.labels, classes));
        if (config.extra_loss) loss = loss + config.extra_loss(weights, batch);
        std::vector<Var> trainable;
        for (const Var& w : weights)
          if (w.requires_grad()) trainable.push_back(w);
        const std::vector<Var> trainable_grads = grad(loss, trainable, {.allow_unused = true});
        std::vector<Tensor> grads;
        for (std::size_t i = 0, t = 0; i < weights.size(); ++i)
          grads.push_back(weights[i].requires_grad() ? trainable_grads[t++].value() : Tensor::zeros_like(weights[i].value()));
        adam_step(model.weights, grads, state, adam, frozen);
        total += loss.item() * static_cast<double>(count);
      }
      out.meta.epoch_losses.push_back(total / static_cast<double>(data.size()));
    }
  } catch (const std::domain_error& e) {
    out.meta.failed = true;
    out.meta.failure = e.what();
  }
  return out;
}

double accuracy(const Model& model, const LabeledData& data) {
  if (data.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
  const std::vector<int> pred = argmax_rows(predict(model, data.images));
  Index hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i];
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

// ---- persistence -------------------------------------------------------------------------

json spec_to_json(const ModelSpec& spec) {
  json layers = json::array();
  for (const Layer& layer : spec.layers) {
    std::visit(Overloaded{
                   [&](const Conv2d& c) {
                     layers.push_back({{"type", "conv2d"},
                                       {"out_channels", c.out_channels},
                                       {"in_channels", c.in_channels},
                                       {"kernel", {c.kernel_h, c.kernel_w}},
                                       {"trainable", c.trainable}});
                   },
                   [&](const Relu&) { layers.push_back({{"type", "relu"}}); },
                   [&](const GlobalAvgPool&) { layers.push_back({{"type", "gap"}}); },
               },
               layer);
  }
  return {{"name", spec.name}, {"layers", layers}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec spec;
  spec.name = j.at("name").get<std::string>();
  for (const json& l : j.at("layers")) {
    const std::string type = l.at("type").get<std::string>();
    if (type == "conv2d") {
      spec.layers.push_back(Conv2d{l.at("out_channels").get<Index>(), l.at("in_channels").get<Index>(),
                                   l.at("kernel").at(0).get<Index>(), l.at("kernel").at(1).get<Index>(),
                                   l.value("trainable", true)});
    } else if (type == "relu") {
      spec.layers.push_back(Relu{});
    } else if (type == "gap") {
      spec.layers.push_back(GlobalAvgPool{});
    } else {
      throw std::invalid_argument("unknown layer type '" + type + "'");
    }
  }
  spec.validate();
  return spec;
}

json checkpoint_to_json(const Checkpoint& checkpoint) {
  json weights = json::array();
  for (const Tensor& w : checkpoint.model.weights) weights.push_back(tensor_to_json(w));
  const TrainMeta& m = checkpoint.meta;
  json meta = {{"seed", m.seed}, {"epochs", m.epochs}, {"epoch_losses", m.epoch_losses},
               {"failed", m.failed}, {"failure", m.failure}, {"extra", m.extra}};
  return {{"version", Checkpoint::kVersion}, {"spec", spec_to_json(checkpoint.model.spec)},
          {"weights", weights}, {"meta", meta}};
}

Checkpoint checkpoint_from_json(const json& j) {
  const int version = j.at("version").get<int>();
  if (version != Checkpoint::kVersion)
    throw std::invalid_argument("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.model.spec = spec_from_json(j.at("spec"));
  const auto convs = c.model.spec.conv_layers();
  const json& weights = j.at("weights");
  if (weights.size() != convs.size()) throw std::invalid_argument("checkpoint weight count does not match spec");
  for (std::size_t i = 0; i < convs.size(); ++i) {
    Tensor w = tensor_from_json(weights[i]);
    const Shape expected = std::get<Conv2d>(c.model.spec.layers[static_cast<std::size_t>(convs[i])]).kernel_shape();
    if (w.shape() != expected)
      throw std::invalid_argument("checkpoint kernel " + std::to_string(i) + " has shape " + shape_str(w.shape()));
    c.model.weights.push_back(std::move(w));
  }
  const json& meta = j.at("meta");
  c.meta.seed = meta.value("seed", std::uint64_t{0});
  c.meta.epochs = meta.value("epochs", 0);
  c.meta.epoch_losses = meta.value("epoch_losses", std::vector<double>{});
  c.meta.failed = meta.value("failed", false);
  c.meta.failure = meta.value("failure", std::string{});
  c.meta.extra = meta.value("extra", json::object());
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  write_json_file(path, checkpoint_to_json(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_json(read_json_file(path)); }

}  // namespace absentia
