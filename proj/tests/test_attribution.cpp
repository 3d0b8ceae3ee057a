#include "absentia/attribution.hpp"
#include "absentia/random.hpp"
#include "absentia/synthdata.hpp"

#include <doctest.h>

#include <cmath>

using namespace absentia;

namespace {

// Green detector and red/blue detector, output 1 presence and output 2 absence.
Model hand_toy(double green_weight = 3.0) {
  Model m = build_toy_model(0);
  m.weights[0] = Tensor(Shape{2, 3, 1, 1}, {0, 1, 0, 1, 0, 1});
  m.weights[1] = Tensor(Shape{2, 2, 1, 1}, {green_weight, -1, -green_weight, 1});
  return m;
}

Model linear_model() {
  Model m;
  m.spec.name = "linear";
  m.spec.layers = {Conv2d{1, 3, 1, 1}, GlobalAvgPool{}};
  m.weights = {Tensor(Shape{1, 3, 1, 1}, {0.5, -2.0, 1.5})};
  return m;
}

Tensor random_image(Index c, Index h, Index w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(Shape{c, h, w});
  for (Index i = 0; i < t.numel(); ++i) t[i] = rng.uniform();
  return t;
}

}  // namespace

TEST_CASE("integration paths") {
  for (IntegrationRule rule : {IntegrationRule::midpoint, IntegrationRule::trapezoid, IntegrationRule::right}) {
    const IntegrationPath p = integration_path(4, rule);
    double total = 0;
    for (double w : p.weights) total += w;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(p.alphas.size() == (rule == IntegrationRule::trapezoid ? 5u : 4u));
    CHECK(parse_integration_rule(to_string(rule)) == rule);
  }
  CHECK(integration_path(2, IntegrationRule::midpoint).alphas == std::vector<double>{0.25, 0.75});
  CHECK_THROWS_AS(integration_path(0, IntegrationRule::midpoint), std::invalid_argument);
  CHECK_THROWS_AS(parse_integration_rule("gauss"), std::invalid_argument);
}

TEST_CASE("linear model is attributed exactly at one step") {
  const Model m = linear_model();
  const Tensor x = random_image(3, 4, 4, 7);
  for (IntegrationRule rule : {IntegrationRule::midpoint, IntegrationRule::trapezoid, IntegrationRule::right}) {
    AttributionConfig cfg;
    cfg.steps = 1;
    cfg.rule = rule;
    const AttributionMap map = integrated_gradients(m, x, 0, cfg);
    for (Index c = 0; c < 3; ++c)
      for (Index i = 0; i < 16; ++i)
        CHECK(map.values[c * 16 + i] == doctest::Approx(x[c * 16 + i] * m.weights[0][c] / 16.0).epsilon(1e-12));
    CHECK(map.completeness_gap < 1e-12);
  }
}

TEST_CASE("input equal to the baseline gives an all-zero map") {
  const Tensor x = random_image(3, 5, 5, 3);
  AttributionConfig cfg;
  cfg.baseline = x;
  const AttributionMap map = integrated_gradients(hand_toy(), x, 1, cfg);
  CHECK((map.values.data() == 0.0).all());
  CHECK(map.completeness_gap == 0.0);
}

TEST_CASE("completeness on the toy architecture") {
  Model m = build_toy_model(5);
  const Tensor x = random_image(3, 6, 6, 11);
  SUBCASE("midpoint rule is exact for a bias-free ReLU network with zero baseline") {
    AttributionConfig cfg;
    cfg.steps = 3;
    const AttributionMap map = integrated_gradients(m, x, 0, cfg);
    CHECK(map.completeness_gap <= 1e-12 * (1 + std::abs(map.output)));
  }
  SUBCASE("trapezoid gap halves as steps double") {
    // The alpha = 0 node sees a zero gradient, every other node is exact.
    AttributionConfig cfg;
    cfg.rule = IntegrationRule::trapezoid;
    double previous = INFINITY;
    for (int steps = 1; steps <= 256; steps *= 2) {
      cfg.steps = steps;
      const AttributionMap map = integrated_gradients(m, x, 1, cfg);
      CHECK(map.completeness_gap == doctest::Approx(std::abs(map.output) / (2.0 * steps)).epsilon(1e-9));
      CHECK(map.completeness_gap <= previous + 1e-9);
      previous = map.completeness_gap;
    }
  }
  SUBCASE("non-zero baseline converges") {
    AttributionConfig cfg;
    cfg.baseline = random_image(3, 6, 6, 12);
    double previous = INFINITY;
    AttributionMap map;
    for (int steps : {64, 512, 4096}) {
      cfg.steps = steps;
      map = integrated_gradients(m, x, 1, cfg);
      CHECK(map.completeness_gap < previous);
      previous = map.completeness_gap;
    }
    CHECK(map.completeness_gap < 1e-3 * std::abs(map.output - map.baseline_output));
  }
}

TEST_CASE("batched attribution equals per-image attribution") {
  const Model m = hand_toy();
  const Tensor a = random_image(3, 4, 4, 1), b = random_image(3, 4, 4, 2);
  AttributionConfig cfg;
  cfg.steps = 16;
  const std::vector<int> targets{0, 1};
  const BatchAttribution batch = attribute_outputs(m, stack({a, b}), targets, cfg);
  CHECK((slice_batch(batch.values, 0).data() - integrated_gradients(m, a, 0, cfg).values.data()).abs().maxCoeff() < 1e-14);
  CHECK((slice_batch(batch.values, 1).data() - integrated_gradients(m, b, 1, cfg).values.data()).abs().maxCoeff() < 1e-14);
  CHECK(batch.gaps.size() == 2);
  CHECK_THROWS_AS(attribute_outputs(m, stack({a, b}), std::vector<int>{0}, cfg), std::invalid_argument);
}

TEST_CASE("non-target attribution of the absence output on a green-pixel image") {
  const Model m = hand_toy();
  const std::vector<Sample> samples = gen_green_pixel(2, 4);
  const Sample& s = samples[0];
  REQUIRE(s.label == 0);
  const AttributionMap map = non_target_attribution(m, s.image, s.label);
  CHECK(map.target == "output:1");
  const Tensor& green = s.concept_of("green")->mask;
  Index at = -1;
  map.values.data().minCoeff(&at);
  CHECK(green[at] == 1.0);
  CHECK(map.values[at] < 0);
  const double green_abs = (map.values.data() * green.data()).abs().maxCoeff();
  const double other_abs = (map.values.data() * (1.0 - green.data())).abs().maxCoeff();
  CHECK(green_abs > other_abs);
  CHECK_THROWS_AS(non_target_attribution(m, s.image, 2), std::invalid_argument);
}

TEST_CASE("a feature the model ignores gets zero attribution") {
  Model m = hand_toy();
  m.weights[0] = Tensor(Shape{2, 3, 1, 1}, {0, 0, 0, 1, 0, 1});
  const Tensor x = random_image(3, 4, 4, 9);
  const AttributionMap map = integrated_gradients(m, x, 0, {});
  CHECK((map.values.data().segment(16, 16) == 0.0).all());
}

TEST_CASE("symmetric features receive permuted attributions") {
  const Model m = hand_toy();
  const Tensor x = random_image(3, 4, 4, 21);
  Tensor swapped = x;
  swapped.data().head(16) = x.data().tail(16);
  swapped.data().tail(16) = x.data().head(16);
  const AttributionMap a = integrated_gradients(m, x, 1, {});
  const AttributionMap b = integrated_gradients(m, swapped, 1, {});
  CHECK((a.values.data().head(16) - b.values.data().tail(16)).abs().maxCoeff() < 1e-15);
  CHECK((a.values.data().segment(16, 16) - b.values.data().segment(16, 16)).abs().maxCoeff() < 1e-15);
}

TEST_CASE("neuron and direction attribution") {
  const Model m = build_toy_model(3);
  const Tensor x = random_image(3, 4, 4, 5);
  const AttributionMap channel = neuron_attribution(m, x, NeuronRef{0, 1, std::nullopt});
  const AttributionMap direction = neuron_attribution(m, x, NeuronRef{0, 0, std::vector<double>{0.0, 1.0}});
  CHECK((channel.values.data() - direction.values.data()).abs().maxCoeff() < 1e-15);
  CHECK(channel.target == "neuron:0:1");
  CHECK_THROWS_AS(neuron_attribution(m, x, NeuronRef{0, 0, std::vector<double>{0.0, 0.0}}), std::invalid_argument);
  CHECK_THROWS_AS(neuron_attribution(m, x, NeuronRef{9, 0, std::nullopt}), std::invalid_argument);
}

TEST_CASE("channel importance") {
  const Model m = hand_toy();
  const std::vector<Sample> samples = gen_green_pixel(2, 8);
  const Tensor& x = samples[0].image;
  const std::vector<double> imp = channel_importance(m, x, 0, 1, {});
  REQUIRE(imp.size() == 2);
  const Tensor logits = predict(m, stack({x}));
  CHECK(imp[0] + imp[1] == doctest::Approx(logits[0]).epsilon(1e-12));
  CHECK(imp[0] > 0);
  CHECK(imp[1] < 0);
  CHECK(select_channels(imp) == std::vector<Index>{0});
  CHECK(select_channels(std::vector<double>{1.0, 0.04, 0.5}) == std::vector<Index>{0, 2});
  CHECK(select_channels(std::vector<double>{-1.0, 0.0}).empty());
  CHECK_THROWS_AS(channel_importance(m, x, 0, 3, {}), std::invalid_argument);
}

TEST_CASE("mask-relative attribution") {
  Tensor values(Shape{2, 4, 4}, 1.0);
  values[3] = -1.0;
  CHECK(mask_relative_attribution(values, Tensor(Shape{4, 4}, 1.0)) == 1.0);
  CHECK(mask_relative_attribution(values, Tensor(Shape{4, 4})) == 0.0);
  Tensor quarter(Shape{4, 4});
  for (Index i = 0; i < 4; ++i) quarter[i] = 1.0;
  CHECK(mask_relative_attribution(values, quarter) == doctest::Approx(0.25));
  CHECK(mask_relative_attribution(Tensor(Shape{2, 4, 4}), quarter) == 0.0);
  CHECK(negative_mass(values, quarter) == 1.0);
  CHECK_THROWS_AS(mask_relative_attribution(values, Tensor(Shape{3, 3})), std::invalid_argument);
  CHECK_THROWS_AS(mask_relative_attribution(values, Tensor(Shape{4, 4}, 0.5)), std::invalid_argument);
}

TEST_CASE("Reichardt non-target attribution marks right-to-left motion negative") {
  const Model m = build_reichardt_model();
  for (int start : {8, 10, 12, 15}) {
    MotionConfig cfg;
    cfg.kind = MotionKind::bidirectional;
    cfg.start = start;
    for (const Sample& s : motion_pairs(gen_motion(cfg))) {
      const AttributionMap map = non_target_attribution(m, s.image, s.label);
      const Tensor& r2l = s.concept_of("r2l")->mask;
      CAPTURE(start);
      CHECK((map.values.data() * r2l.data()).sum() < 0);
    }
  }
}
