#include "absentia/synthdata.hpp"

#include "absentia/random.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace absentia {

namespace fs = std::filesystem;

const ConceptAnnotation* Sample::concept_of(const std::string& id) const {
  for (const ConceptAnnotation& c : concepts)
    if (c.concept_id == id) return &c;
  return nullptr;
}

LabeledData to_labeled(const std::vector<Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("to_labeled: no samples");
  std::vector<Tensor> images;
  LabeledData out;
  bool any_mask = false;
  for (const Sample& s : samples) {
    images.push_back(s.image);
    out.labels.push_back(s.label);
    any_mask = any_mask || s.bias_mask.has_value();
  }
  out.images = stack(images);
  if (any_mask) {
    std::vector<Tensor> masks;
    const Shape hw{samples.front().image.dim(1), samples.front().image.dim(2)};
    for (const Sample& s : samples) masks.push_back(s.bias_mask ? *s.bias_mask : Tensor(hw));
    out.masks = stack(masks);
  }
  return out;
}

// ---- motion ------------------------------------------------------------------------

int motion_label(MotionKind kind) { return kind == MotionKind::left_to_right ? 0 : 1; }

MotionSequence gen_motion(const MotionConfig& config) {
  if (config.frames < 2) throw std::invalid_argument("gen_motion: need at least 2 frames");
  if (config.height < 1 || config.width < 2) throw std::invalid_argument("gen_motion: image too small");
  const bool bidir = config.kind == MotionKind::bidirectional;
  if (bidir && (config.width < 8 || config.width % 2 != 0))
    throw std::invalid_argument("gen_motion: bi-directional stimuli need an even width of at least 8 "
                                "to keep the columns apart");
  Rng rng(mix_seed(config.seed, 0x6D6F74));
  MotionSequence seq;
  seq.kind = config.kind;
  seq.width = config.width;
  seq.height = config.height;

  int start = 0;
  if (config.start) {
    start = *config.start;
  } else if (bidir) {
    start = static_cast<int>(rng.range(config.width / 2, config.width - 1));
  } else {
    start = static_cast<int>(rng.range(0, config.width - 1));
  }
  if (start < 0 || start >= config.width) throw std::invalid_argument("gen_motion: start column out of range");
  if (bidir && start == config.width - 1 - start) throw std::invalid_argument("gen_motion: columns overlap at start");

  auto wrap = [w = config.width](int x) { return ((x % w) + w) % w; };
  seq.columns.push_back({+1, {}});
  if (bidir) seq.columns.push_back({-1, {}});
  for (int k = 0; k < config.frames; ++k) {
    Tensor frame(Shape{config.height, config.width});
    seq.columns[0].positions.push_back(wrap(start + k));
    if (bidir) seq.columns[1].positions.push_back(wrap(config.width - 1 - start - k));
    for (const MotionColumn& col : seq.columns)
      for (int y = 0; y < config.height; ++y) frame[y * config.width + col.positions.back()] = 1.0;
    seq.frames.push_back(std::move(frame));
  }
  return seq;
}

std::vector<Sample> motion_pairs(const MotionSequence& sequence, Index first_id) {
  std::vector<Sample> out;
  const int h = sequence.height, w = sequence.width;
  for (std::size_t k = 0; k + 1 < sequence.frames.size(); ++k) {
    bool wraps = false;
    for (const MotionColumn& col : sequence.columns)
      wraps = wraps || col.positions[k + 1] - col.positions[k] != col.direction;
    if (wraps) continue;
    Sample s;
    s.id = first_id + static_cast<Index>(out.size());
    s.label = motion_label(sequence.kind);
    s.image = Tensor(Shape{2, h, w});
    s.image.data().head(h * w) = sequence.frames[k].data();
    s.image.data().tail(h * w) = sequence.frames[k + 1].data();
    Tensor l2r(s.image.shape()), r2l(s.image.shape());
    for (const MotionColumn& col : sequence.columns) {
      Tensor& mask = col.direction > 0 ? l2r : r2l;
      for (int y = 0; y < h; ++y) {
        mask.at3(0, y, col.positions[k]) = 1.0;
        mask.at3(1, y, col.positions[k + 1]) = 1.0;
      }
    }
    s.concepts.push_back({"l2r", std::move(l2r)});
    s.concepts.push_back({"r2l", std::move(r2l)});
    out.push_back(std::move(s));
  }
  return out;
}

// ---- green pixel ------------------------------------------------------------------------

std::vector<Sample> gen_green_pixel(Index n, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("gen_green_pixel: need at least 2 samples");
  constexpr int size = kGreenPixelSize;
  constexpr std::array<double, 3> levels{0.0, 0.5, 1.0};
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, 0x677278, static_cast<std::uint64_t>(i)));
    Sample s;
    s.id = i;
    s.label = static_cast<int>(i % 2);
    s.image = Tensor(Shape{3, size, size});
    const int coloured = static_cast<int>(rng.range(8, 12));
    const int total = coloured + (s.label == 0 ? 1 : 0);
    std::vector<int> cells;
    while (static_cast<int>(cells.size()) < total) {
      const int cell = static_cast<int>(rng.below(size * size));
      if (std::find(cells.begin(), cells.end(), cell) == cells.end()) cells.push_back(cell);
    }
    for (int j = 0; j < coloured; ++j) {
      double r = 0, b = 0;
      while (r == 0 && b == 0) {
        r = levels[rng.below(3)];
        b = levels[rng.below(3)];
      }
      s.image.at3(0, cells[j] / size, cells[j] % size) = r;
      s.image.at3(2, cells[j] / size, cells[j] % size) = b;
    }
    if (s.label == 0) {
      const int g = cells.back();
      s.image.at3(1, g / size, g % size) = 1.0;
      Tensor mask(s.image.shape());
      for (int c = 0; c < 3; ++c) mask.at3(c, g / size, g % size) = 1.0;
      s.concepts.push_back({"green", std::move(mask)});
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---- biased patch --------------------------------------------------------------------------

BiasMode parse_bias_mode(const std::string& text) {
  if (text == "training") return BiasMode::training;
  if (text == "inverse") return BiasMode::inverse;
  if (text == "none") return BiasMode::none;
  throw std::invalid_argument("unknown bias mode '" + text + "'");
}

std::string to_string(BiasMode mode) {
  switch (mode) {
    case BiasMode::training: return "training";
    case BiasMode::inverse: return "inverse";
    case BiasMode::none: return "none";
  }
  return "?";
}

namespace {

constexpr int kSize = kBiasImageSize;

// Lesion image plus a map of where the lesion is (for the overlap rule).
struct Lesion {
  Tensor image;
  Tensor footprint;  // H x W in {0,1}
};

Lesion draw_lesion(int label, Rng& rng) {
  Lesion out{Tensor(Shape{3, kSize, kSize}), Tensor(Shape{kSize, kSize})};
  std::array<double, 3> skin{0.82 + rng.uniform(-0.06, 0.06), 0.62 + rng.uniform(-0.06, 0.06),
                             0.52 + rng.uniform(-0.06, 0.06)};
  const double cx = rng.uniform(12.0, 20.0), cy = rng.uniform(12.0, 20.0);
  const double radius = rng.uniform(5.0, 8.0);
  const bool malignant = label == 1;
  // Benign lesions blend towards brown, malignant ones towards a blue-grey veil.
  const std::array<double, 3> base = malignant ? std::array<double, 3>{0.30, 0.35, 0.55}
                                               : std::array<double, 3>{0.55, 0.35, 0.22};
  std::array<double, 3> colour{};
  for (std::size_t c = 0; c < 3; ++c) colour[c] = base[c] + rng.uniform(-0.05, 0.05);
  const double opacity = rng.uniform(0.5, 0.9);
  const double a3 = malignant ? rng.uniform(0.15, 0.30) : 0.0;
  const double a5 = malignant ? rng.uniform(0.05, 0.15) : 0.0;
  const double p3 = rng.uniform(0.0, 2 * std::numbers::pi), p5 = rng.uniform(0.0, 2 * std::numbers::pi);
  const double mottle = malignant ? 0.35 : 0.08;
  for (int y = 0; y < kSize; ++y)
    for (int x = 0; x < kSize; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double theta = std::atan2(dy, dx);
      const double r = radius * (1.0 + a3 * std::sin(3 * theta + p3) + a5 * std::sin(5 * theta + p5));
      const double d = std::hypot(dx, dy);
      const double profile = std::clamp((r + 1.0 - d) / 2.0, 0.0, 1.0);
      out.footprint[y * kSize + x] = profile > 0.5 ? 1.0 : 0.0;
      const double texture = 1.0 + mottle * rng.uniform(-1.0, 1.0);
      const double alpha = std::clamp(opacity * profile * texture, 0.0, 1.0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double noise = rng.uniform(-0.04, 0.04);
        out.image.at3(static_cast<Index>(c), y, x) = std::clamp(skin[c] * (1.0 - alpha) + colour[c] * alpha + noise, 0.0, 1.0);
      }
    }
  return out;
}

}  // namespace

Tensor paste_bias_patch(Tensor& image, int row, int col, std::uint64_t colour_seed) {
  static constexpr std::array<std::array<double, 3>, 6> palette{{
      {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {0, 1, 1}, {1, 0, 1}}};
  const int h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  if (row < 0 || col < 0 || row + kBiasPatchSize > h || col + kBiasPatchSize > w)
    throw std::invalid_argument("paste_bias_patch: patch does not fit");
  Rng rng(colour_seed);
  constexpr int cell = kBiasPatchSize / 3;
  for (int gy = 0; gy < 3; ++gy)
    for (int gx = 0; gx < 3; ++gx) {
      const auto& colour = palette[rng.below(palette.size())];
      for (int y = 0; y < cell; ++y)
        for (int x = 0; x < cell; ++x)
          for (int c = 0; c < 3; ++c) image.at3(c, row + gy * cell + y, col + gx * cell + x) = colour[static_cast<std::size_t>(c)];
    }
  Tensor mask(Shape{h, w});
  for (int y = std::max(0, row - kBiasMaskDilation); y < std::min(h, row + kBiasPatchSize + kBiasMaskDilation); ++y)
    for (int x = std::max(0, col - kBiasMaskDilation); x < std::min(w, col + kBiasPatchSize + kBiasMaskDilation); ++x)
      mask[y * w + x] = 1.0;
  return mask;
}

std::vector<Sample> gen_biased_split(Index n, BiasMode mode, std::uint64_t seed, std::uint64_t stream) {
  if (n < 4) throw std::invalid_argument("gen_biased_patch: need at least 2 samples per class");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Sample s;
    s.id = i;
    s.label = static_cast<int>(i % 2);
    Rng lesion_rng(mix_seed(seed, stream, static_cast<std::uint64_t>(i)));
    Rng patch_rng(mix_seed(seed ^ 0xA5A5A5A5ULL, stream, static_cast<std::uint64_t>(i)));
    Lesion lesion = draw_lesion(s.label, lesion_rng);
    s.image = std::move(lesion.image);
    const bool patched = (mode == BiasMode::training && s.label == 0) || (mode == BiasMode::inverse && s.label == 1);
    if (patched) {
      for (int attempt = 0;; ++attempt) {
        const int edge = static_cast<int>(patch_rng.below(4));
        const int along = static_cast<int>(patch_rng.range(0, kSize - kBiasPatchSize));
        const int far = kSize - kBiasPatchSize;
        const int row = edge == 0 ? 0 : edge == 1 ? far : along;
        const int col = edge == 2 ? 0 : edge == 3 ? far : along;
        double overlap = 0.0;
        for (int y = row; y < row + kBiasPatchSize; ++y)
          for (int x = col; x < col + kBiasPatchSize; ++x) overlap += lesion.footprint[y * kSize + x];
        if (overlap > 0.5 * kBiasPatchSize * kBiasPatchSize && attempt < 100) continue;
        s.bias_mask = paste_bias_patch(s.image, row, col, patch_rng.fork(0).below(UINT64_MAX));
        break;
      }
    } else {
      s.bias_mask = Tensor(Shape{kSize, kSize});
    }
    out.push_back(std::move(s));
  }
  return out;
}

BiasedSplits gen_biased_patch(Index n_train, Index n_val, BiasMode mode, std::uint64_t seed) {
  return {gen_biased_split(n_train, mode, seed, 0), gen_biased_split(n_val, mode, seed, 1)};
}

// ---- specs and dumps --------------------------------------------------------------------------

json dataset_spec_to_json(const DatasetSpec& spec) {
  return {{"kind", spec.kind}, {"size", spec.size}, {"seed", spec.seed}, {"params", spec.params}};
}

DatasetSpec dataset_spec_from_json(const json& j) {
  return {j.at("kind").get<std::string>(), j.at("size").get<Index>(), j.at("seed").get<std::uint64_t>(),
          j.value("params", json::object())};
}

std::vector<Sample> generate(const DatasetSpec& spec) {
  if (spec.kind == "green_pixel") return gen_green_pixel(spec.size, spec.seed);
  if (spec.kind == "biased_patch") {
    const BiasMode mode = parse_bias_mode(spec.params.value("bias", std::string("training")));
    const std::uint64_t stream = spec.params.value("split", std::string("train")) == "train" ? 0 : 1;
    return gen_biased_split(spec.size, mode, spec.seed, stream);
  }
  if (spec.kind == "motion") {
    // `size` sequences per kind (alternating), all valid frame pairs kept.
    MotionConfig base;
    base.frames = spec.params.value("frames", 5);
    base.width = spec.params.value("width", 16);
    base.height = spec.params.value("height", 4);
    const std::string kinds = spec.params.value("kinds", std::string("mixed"));
    std::vector<Sample> out;
    for (Index i = 0; i < spec.size; ++i) {
      MotionConfig c = base;
      c.seed = mix_seed(spec.seed, 0x736571, static_cast<std::uint64_t>(i));
      c.kind = kinds == "l2r" ? MotionKind::left_to_right
               : kinds == "bidir" ? MotionKind::bidirectional
               : (i % 2 == 0 ? MotionKind::left_to_right : MotionKind::bidirectional);
      for (Sample& s : motion_pairs(gen_motion(c), static_cast<Index>(out.size()))) out.push_back(std::move(s));
    }
    return out;
  }
  throw std::invalid_argument("unknown dataset kind '" + spec.kind + "'");
}

namespace {

Tensor pad_to_rgb(const Tensor& chw) {
  if (chw.dim(0) == 3) return chw;
  Tensor out(Shape{3, chw.dim(1), chw.dim(2)});
  out.data().head(chw.numel()) = chw.data();
  return out;
}

}  // namespace

void dump_dataset(const fs::path& dir, const DatasetSpec& spec, const std::vector<Sample>& samples) {
  fs::create_directories(dir);
  json entries = json::array();
  for (const Sample& s : samples) {
    const std::string file = "sample_" + std::to_string(s.id) + ".ppm";
    write_ppm(dir / file, tensor_to_rgb(pad_to_rgb(s.image)));
    json entry = {{"id", s.id}, {"file", file}, {"label", s.label}};
    if (s.bias_mask && s.bias_mask->data().sum() > 0) {
      const std::string mask_file = "mask_" + std::to_string(s.id) + ".ppm";
      write_ppm(dir / mask_file, tensor_to_rgb(s.bias_mask->reshaped({1, s.bias_mask->dim(0), s.bias_mask->dim(1)})));
      entry["mask_file"] = mask_file;
    }
    entries.push_back(entry);
  }
  write_json_file(dir / "manifest.json",
                  {{"spec", dataset_spec_to_json(spec)}, {"channels", samples.empty() ? 0 : samples.front().image.dim(0)},
                   {"samples", entries}});
}

std::vector<Sample> load_dataset(const fs::path& dir) {
  const json manifest = read_json_file(dir / "manifest.json");
  if (manifest.contains("spec")) return generate(dataset_spec_from_json(manifest.at("spec")));
  const Index channels = manifest.value("channels", Index{3});
  std::vector<Sample> out;
  for (const json& entry : manifest.at("samples")) {
    Sample s;
    s.id = entry.value("id", static_cast<Index>(out.size()));
    s.label = entry.at("label").get<int>();
    Tensor rgb = rgb_to_tensor(read_ppm(dir / entry.at("file").get<std::string>()));
    s.image = Tensor(Shape{channels, rgb.dim(1), rgb.dim(2)}, rgb.data().head(channels * rgb.dim(1) * rgb.dim(2)).eval());
    if (entry.contains("mask_file")) {
      Tensor m = rgb_to_tensor(read_ppm(dir / entry.at("mask_file").get<std::string>()));
      s.bias_mask = Tensor(Shape{m.dim(1), m.dim(2)}, (m.data().head(m.dim(1) * m.dim(2)) > 0.5).cast<double>().eval());
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace absentia
