#include "absentia/random.hpp"
#include "absentia/synthdata.hpp"

#include <doctest.h>

#include <array>
#include <cmath>
#include <filesystem>

using namespace absentia;

namespace {

// Two-sample chi-square homogeneity statistic over matching bins.
double chi_square(const std::vector<double>& a, const std::vector<double>& b) {
  double na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i];
    nb += b[i];
  }
  double chi2 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double total = a[i] + b[i];
    if (total == 0) continue;
    const double ea = total * na / (na + nb), eb = total * nb / (na + nb);
    chi2 += (a[i] - ea) * (a[i] - ea) / ea + (b[i] - eb) * (b[i] - eb) / eb;
  }
  return chi2;
}

// Upper tail of the chi-square distribution for 2 and 4 degrees of freedom.
double chi2_p_df2(double x) { return std::exp(-x / 2); }
double chi2_p_df4(double x) { return std::exp(-x / 2) * (1 + x / 2); }

bool is_coloured(const Tensor& image, Index y, Index x) {
  return image.at3(0, y, x) > 0 || image.at3(2, y, x) > 0;
}

}  // namespace

TEST_CASE("left-to-right motion") {
  MotionConfig cfg;
  cfg.start = 1;
  const MotionSequence seq = gen_motion(cfg);
  REQUIRE(seq.frames.size() == 5);
  for (int k = 0; k < 5; ++k) {
    CHECK(seq.columns[0].positions[static_cast<std::size_t>(k)] == 1 + k);
    for (int y = 0; y < cfg.height; ++y) CHECK(seq.frames[static_cast<std::size_t>(k)][y * cfg.width + 1 + k] == 1.0);
    CHECK(seq.frames[static_cast<std::size_t>(k)].data().sum() == cfg.height);
  }
  const std::vector<Sample> pairs = motion_pairs(seq, 10);
  REQUIRE(pairs.size() == 4);
  CHECK(pairs[0].id == 10);
  CHECK(pairs[0].image.shape() == Shape{2, 4, 16});
  CHECK(pairs[0].label == 0);
  CHECK(pairs[0].concept_of("l2r")->mask.data().sum() == 8);
  CHECK(pairs[0].concept_of("r2l")->mask.data().sum() == 0);
}

TEST_CASE("pairs crossing the border are skipped") {
  MotionConfig cfg;
  cfg.start = 14;
  const std::vector<Sample> pairs = motion_pairs(gen_motion(cfg));
  CHECK(pairs.size() == 3);
}

TEST_CASE("bi-directional motion") {
  MotionConfig cfg;
  cfg.kind = MotionKind::bidirectional;
  cfg.start = 10;
  const MotionSequence seq = gen_motion(cfg);
  for (const Tensor& f : seq.frames) CHECK(f.data().sum() == 2 * cfg.height);
  CHECK(seq.columns[1].positions.front() == 5);
  for (const Sample& s : motion_pairs(seq)) {
    CHECK(s.label == 1);
    CHECK(s.concept_of("r2l")->mask.data().sum() == 8);
  }
  cfg.start.reset();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    cfg.seed = seed;
    const MotionSequence random = gen_motion(cfg);
    CHECK(random.columns[0].positions.front() >= cfg.width / 2);
    CHECK(random.frames.front().data().sum() == 2 * cfg.height);
  }
}

TEST_CASE("motion errors") {
  MotionConfig cfg;
  cfg.frames = 1;
  CHECK_THROWS_AS(gen_motion(cfg), std::invalid_argument);
  cfg.frames = 5;
  cfg.kind = MotionKind::bidirectional;
  cfg.width = 6;
  CHECK_THROWS_AS(gen_motion(cfg), std::invalid_argument);
  cfg.width = 16;
  cfg.start = 16;
  CHECK_THROWS_AS(gen_motion(cfg), std::invalid_argument);
}

TEST_CASE("green pixel images") {
  const std::vector<Sample> samples = gen_green_pixel(400, 3);
  int class1 = 0;
  for (const Sample& s : samples) {
    CHECK(s.image.shape() == Shape{3, 32, 32});
    int green = 0, coloured = 0;
    for (Index y = 0; y < 32; ++y)
      for (Index x = 0; x < 32; ++x) {
        const double r = s.image.at3(0, y, x), g = s.image.at3(1, y, x), b = s.image.at3(2, y, x);
        if (g == 1.0) {
          ++green;
          CHECK(r == 0.0);
          CHECK(b == 0.0);
        } else {
          CHECK(g == 0.0);
        }
        for (double v : {r, b}) CHECK((v == 0.0 || v == 0.5 || v == 1.0));
        coloured += is_coloured(s.image, y, x);
      }
    CHECK(coloured >= 8);
    CHECK(coloured <= 12);
    CHECK(green == (s.label == 0 ? 1 : 0));
    CHECK((s.concept_of("green") != nullptr) == (s.label == 0));
    class1 += s.label == 0;
  }
  CHECK(class1 == 200);
  CHECK(gen_green_pixel(kGreenPixelTestSize, 2).size() == 1000);
  CHECK(gen_green_pixel(5, 3)[4].image == samples[4].image);
  CHECK_THROWS_AS(gen_green_pixel(1, 0), std::invalid_argument);
}

TEST_CASE("without its green pixel a class-1 image looks like class 2") {
  const std::vector<Sample> samples = gen_green_pixel(4000, 77);
  Rng rng(5);
  constexpr std::array<double, 3> levels{0.0, 0.5, 1.0};
  // Per-channel value histograms over coloured pixels, green replaced by a
  // sampled non-green colour.
  std::array<std::vector<double>, 2> red{std::vector<double>(3), std::vector<double>(3)};
  std::array<std::vector<double>, 2> blue = red;
  // Number of coloured pixels, green replaced by background.
  std::array<std::vector<double>, 2> counts{std::vector<double>(5), std::vector<double>(5)};
  for (const Sample& s : samples) {
    Tensor image = s.image;
    int coloured = 0;
    for (Index y = 0; y < 32; ++y)
      for (Index x = 0; x < 32; ++x) coloured += is_coloured(image, y, x);
    counts[static_cast<std::size_t>(s.label)][static_cast<std::size_t>(coloured - 8)] += 1;
    if (s.label == 0) {
      const Tensor& mask = s.concept_of("green")->mask;
      Index at = 0;
      mask.data().head(32 * 32).maxCoeff(&at);
      double r = 0, b = 0;
      while (r == 0 && b == 0) {
        r = levels[rng.below(3)];
        b = levels[rng.below(3)];
      }
      image[at] = r;
      image[32 * 32 + at] = 0;
      image[2 * 32 * 32 + at] = b;
    }
    for (Index y = 0; y < 32; ++y)
      for (Index x = 0; x < 32; ++x) {
        if (!is_coloured(image, y, x)) continue;
        red[static_cast<std::size_t>(s.label)][static_cast<std::size_t>(image.at3(0, y, x) * 2)] += 1;
        blue[static_cast<std::size_t>(s.label)][static_cast<std::size_t>(image.at3(2, y, x) * 2)] += 1;
      }
  }
  CHECK(chi2_p_df2(chi_square(red[0], red[1])) > 0.01);
  CHECK(chi2_p_df2(chi_square(blue[0], blue[1])) > 0.01);
  CHECK(chi2_p_df4(chi_square(counts[0], counts[1])) > 0.01);
}

TEST_CASE("biased patch splits") {
  const BiasedSplits training = gen_biased_patch(40, 20, BiasMode::training, 9);
  const BiasedSplits inverse = gen_biased_patch(40, 20, BiasMode::inverse, 9);
  const BiasedSplits none = gen_biased_patch(40, 20, BiasMode::none, 9);
  for (const auto* split : {&training.train, &training.val, &inverse.train, &none.val}) {
    int per_class[2] = {0, 0};
    for (const Sample& s : *split) ++per_class[s.label];
    CHECK(per_class[0] == per_class[1]);
  }
  for (std::size_t i = 0; i < training.train.size(); ++i) {
    const Sample& t = training.train[i];
    const Sample& v = inverse.train[i];
    const Sample& n = none.train[i];
    REQUIRE(t.bias_mask);
    CHECK(t.bias_mask->shape() == Shape{32, 32});
    CHECK(t.image.data().minCoeff() >= 0.0);
    CHECK(t.image.data().maxCoeff() <= 1.0);
    CHECK((t.bias_mask->data().sum() > 0) == (t.label == 0));
    CHECK((v.bias_mask->data().sum() > 0) == (v.label == 1));
    CHECK(n.bias_mask->data().sum() == 0);
    // The lesion does not depend on the bias mode; only patch pixels differ.
    const Tensor& mask = t.label == 0 ? *t.bias_mask : *v.bias_mask;
    const Tensor& patched = t.label == 0 ? t.image : v.image;
    for (Index c = 0; c < 3; ++c)
      for (Index p = 0; p < 32 * 32; ++p)
        if (mask[p] == 0) CHECK(patched[c * 32 * 32 + p] == n.image[c * 32 * 32 + p]);
    if (mask.data().sum() > 0) {
      CHECK(mask.data().sum() >= 36);
      CHECK(mask.data().sum() <= 100);
    }
  }
  CHECK(training.val.front().image == gen_biased_split(20, BiasMode::training, 9, 1).front().image);
  CHECK_FALSE(training.val.front().image == training.train.front().image);
  CHECK(parse_bias_mode(to_string(BiasMode::inverse)) == BiasMode::inverse);
  CHECK_THROWS_AS(parse_bias_mode("sideways"), std::invalid_argument);
  CHECK_THROWS_AS(gen_biased_split(2, BiasMode::none, 0, 0), std::invalid_argument);
}

TEST_CASE("patch pasting") {
  Tensor image(Shape{3, 32, 32}, 0.5);
  const Tensor mask = paste_bias_patch(image, 0, 26, 4);
  CHECK(mask.data().sum() == 8 * 8);
  for (Index y = 0; y < 6; ++y)
    for (Index x = 26; x < 32; ++x)
      for (Index c = 0; c < 3; ++c) CHECK((image.at3(c, y, x) == 0.0 || image.at3(c, y, x) == 1.0));
  CHECK(image.at3(0, 6, 26) == 0.5);
  CHECK_THROWS_AS(paste_bias_patch(image, 27, 0, 1), std::invalid_argument);
}

TEST_CASE("dataset specs, dumps and regeneration") {
  const DatasetSpec spec{"green_pixel", 6, 12, json::object()};
  CHECK(dataset_spec_to_json(dataset_spec_from_json(dataset_spec_to_json(spec))) == dataset_spec_to_json(spec));
  const std::vector<Sample> a = generate(spec), b = generate(spec);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].image == b[i].image);

  const auto dir = std::filesystem::temp_directory_path() / "absentia_test_dump";
  std::filesystem::remove_all(dir);
  dump_dataset(dir, spec, a);
  const std::vector<Sample> regenerated = load_dataset(dir);
  REQUIRE(regenerated.size() == a.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(regenerated[i].image == a[i].image);

  // Without the spec the PPMs are read back (8-bit quantized).
  json manifest = read_json_file(dir / "manifest.json");
  manifest.erase("spec");
  write_json_file(dir / "manifest.json", manifest);
  const std::vector<Sample> read = load_dataset(dir);
  REQUIRE(read.size() == a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(read[i].label == a[i].label);
    CHECK((read[i].image.data() - a[i].image.data()).abs().maxCoeff() <= 0.5 / 255 + 1e-12);
  }

  const DatasetSpec biased{"biased_patch", 8, 1, {{"bias", "training"}, {"split", "val"}}};
  const std::vector<Sample> patched = generate(biased);
  dump_dataset(dir / "biased", biased, patched);
  manifest = read_json_file(dir / "biased" / "manifest.json");
  manifest.erase("spec");
  write_json_file(dir / "biased" / "manifest.json", manifest);
  const std::vector<Sample> masks = load_dataset(dir / "biased");
  for (std::size_t i = 0; i < patched.size(); ++i)
    CHECK((masks[i].bias_mask.has_value() ? *masks[i].bias_mask : Tensor(Shape{32, 32})) == *patched[i].bias_mask);

  const DatasetSpec motion{"motion", 4, 2, {{"kinds", "mixed"}}};
  const std::vector<Sample> m = generate(motion);
  CHECK_FALSE(m.empty());
  CHECK(m.front().image.dim(0) == 2);
  CHECK_THROWS_AS(generate(DatasetSpec{"cifar", 1, 0, json::object()}), std::invalid_argument);
  std::filesystem::remove_all(dir);
}
