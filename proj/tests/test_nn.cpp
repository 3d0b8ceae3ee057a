#include "absentia/nn.hpp"
#include "absentia/random.hpp"
#include "absentia/synthdata.hpp"
#include "gradcheck.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace absentia;

namespace {

Tensor logits_of(const Model& m, const Tensor& image) { return predict(m, stack({image})); }

Tensor mirrored(const Tensor& image) {
  Tensor out(image.shape());
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  for (Index k = 0; k < c; ++k)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) out.at3(k, y, x) = image.at3(k, y, w - 1 - x);
  return out;
}

LabeledData small_green_set(Index n, std::uint64_t seed) {
  std::vector<Sample> s = gen_green_pixel(n, seed);
  return to_labeled(s);
}

}  // namespace

TEST_CASE("model spec validation") {
  ModelSpec spec{"bad", {Conv2d{2, 3, 1, 1}, Conv2d{2, 4, 1, 1}}};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec.layers = {Relu{}};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec.layers = {Conv2d{2, 3, 1, 1}, GlobalAvgPool{}, Conv2d{2, 2, 1, 1}};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  const Model toy = build_toy_model(0);
  CHECK(toy.spec.input_channels() == 3);
  CHECK(toy.spec.output_channels() == 2);
  CHECK(toy.spec.weight_index(2) == 1);
  CHECK(toy.spec.weight_index(1) == -1);
  CHECK(toy.spec.conv_layers() == std::vector<int>{0, 2});
}

TEST_CASE("neuron references") {
  const Model toy = build_toy_model(0);
  const NeuronRef n = NeuronRef::parse("2:1");
  CHECK(n.layer == 2);
  CHECK(n.channel == 1);
  CHECK_NOTHROW(n.validate(toy.spec));
  CHECK_THROWS_AS(NeuronRef::parse("3"), std::invalid_argument);
  CHECK_THROWS_AS((NeuronRef{0, 2, std::nullopt}.validate(toy.spec)), std::invalid_argument);
  CHECK_THROWS_AS((NeuronRef{7, 0, std::nullopt}.validate(toy.spec)), std::invalid_argument);
  CHECK_THROWS_AS((NeuronRef{0, 0, std::vector<double>{1.0, 1.0}}.validate(toy.spec)), std::invalid_argument);
  CHECK_THROWS_AS((NeuronRef{0, 0, std::vector<double>{1.0}}.validate(toy.spec)), std::invalid_argument);
  const double s = std::sqrt(0.5);
  CHECK_NOTHROW((NeuronRef{0, 0, std::vector<double>{s, -s}}.validate(toy.spec)));
}

TEST_CASE("toy model") {
  Model m = build_toy_model(1);
  CHECK(logits_of(m, Tensor(Shape{3, 32, 32}, 0.5)).shape() == Shape{1, 2});
  CHECK(build_toy_model(1).weights[0] == m.weights[0]);
  CHECK_FALSE(build_toy_model(2).weights[0] == m.weights[0]);

  for (Tensor& w : m.weights) w.data().setZero();
  CHECK((logits_of(m, Tensor(Shape{3, 32, 32}, 0.7)).data() == 0.0).all());

  SUBCASE("hand-set detectors") {
    m.weights[0] = Tensor(Shape{2, 3, 1, 1}, {0, 1, 0, 1, 0, 1});
    m.weights[1] = Tensor(Shape{2, 2, 1, 1}, {1, -1, -1, 1});
    Tensor green(Shape{3, 32, 32});
    green.at3(1, 4, 9) = 1.0;
    const Tensor l = logits_of(m, green);
    CHECK(l[0] > l[1]);
    CHECK(l[0] == doctest::Approx(1.0 / 1024));
    Tensor red(Shape{3, 32, 32});
    red.at3(0, 4, 9) = 1.0;
    const Tensor r = logits_of(m, red);
    CHECK(r[1] > r[0]);
  }
}

TEST_CASE("bias model shapes and determinism") {
  const Model a = build_bias_model(4), b = build_bias_model(4);
  CHECK(a.weights.size() == 3);
  for (std::size_t i = 0; i < a.weights.size(); ++i) CHECK(a.weights[i] == b.weights[i]);
  CHECK(logits_of(a, Tensor(Shape{3, 32, 32}, 0.3)).shape() == Shape{1, 2});
}

TEST_CASE("bias model gradient matches finite differences") {
  Model m = build_bias_model(2);
  Rng rng(5);
  Tensor x(Shape{2, 3, 7, 7});
  for (Index i = 0; i < x.numel(); ++i) x[i] = rng.uniform();
  const Tensor targets = one_hot({0, 1}, 2);
  for (std::size_t k = 0; k < m.weights.size(); ++k) {
    std::vector<Var> w = m.constants();
    w[k] = Var::param(m.weights[k]);
    const Tensor analytic = grad(bce_loss(forward(m.spec, w, Var::constant(x)), targets), w[k]).value();
    const Tensor numeric = absentia::testing::numeric_gradient(
        [&](const Tensor& t) {
          NoGradGuard off;
          std::vector<Var> v = m.constants();
          v[k] = Var::constant(t);
          return bce_loss(forward(m.spec, v, Var::constant(x)), targets).item();
        },
        m.weights[k]);
    CAPTURE(k);
    CHECK(absentia::testing::relative_error(analytic, numeric) <= 1e-6);
  }
}

TEST_CASE("Reichardt model") {
  const Model m = build_reichardt_model();
  CHECK(logits_of(m, Tensor(Shape{2, 4, 16})).data().isZero());

  for (int start = 0; start < 16; ++start) {
    MotionConfig l2r;
    l2r.start = start;
    for (const Sample& s : motion_pairs(gen_motion(l2r))) {
      const Tensor out = logits_of(m, s.image);
      CHECK(out[0] > 0);
      CHECK(out[1] > 0);
    }
  }
  for (int start = 8; start < 16; ++start) {
    MotionConfig bidir;
    bidir.kind = MotionKind::bidirectional;
    bidir.start = start;
    for (const Sample& s : motion_pairs(gen_motion(bidir))) {
      const Tensor out = logits_of(m, s.image);
      CHECK(std::abs(out[0]) < 1e-9);
      CHECK(out[1] > 0);
    }
  }
}

TEST_CASE("Reichardt directional selectivity") {
  const Model m = build_reichardt_model();
  const std::vector<Var> w = m.constants();
  for (int start = 0; start < 16; ++start) {
    MotionConfig cfg;
    cfg.start = start;
    cfg.width = 16;
    for (const Sample& s : motion_pairs(gen_motion(cfg))) {
      for (bool mirror : {false, true}) {
        const Tensor x = stack({mirror ? mirrored(s.image) : s.image});
        const Tensor z = forward_range(m.spec, w, Var::constant(x), 0, 1).value();
        const Index p = z.numel() / 2;
        const double left = z.data().head(p).sum(), right = z.data().tail(p).sum();
        CAPTURE(start);
        CAPTURE(mirror);
        if (mirror)
          CHECK(right > left);
        else
          CHECK(left > right);
      }
    }
  }
}

TEST_CASE("binary cross-entropy") {
  CHECK(bce_loss(Var::constant(Tensor(Shape{1, 2}, {0, 0})), one_hot({0}, 2)).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(bce_loss(Var::constant(Tensor(Shape{1, 2}, {20, -20})), one_hot({0}, 2)).item() < 1e-8);
  CHECK(bce_loss(Var::constant(Tensor(Shape{1, 2}, {800, -800})), one_hot({0}, 2)).item() == 0.0);

  Rng rng(17);
  Tensor logits(Shape{6, 2});
  for (Index i = 0; i < logits.numel(); ++i) logits[i] = rng.uniform(-6, 6);
  const std::vector<int> labels{0, 1, 1, 0, 1, 0};
  const Tensor t = one_hot(labels, 2);
  long double expected = 0;
  for (Index i = 0; i < logits.numel(); ++i) {
    const long double s = 1.0L / (1.0L + std::exp(-static_cast<long double>(logits[i])));
    expected -= t[i] * std::log(s) + (1 - t[i]) * std::log(1.0L - s);
  }
  expected /= logits.numel();
  CHECK(bce_loss(Var::constant(logits), t).item() == doctest::Approx(static_cast<double>(expected)).epsilon(1e-13));

  CHECK_THROWS_AS(bce_loss(Var::constant(logits), Tensor(Shape{6, 2}, 0.5)), std::invalid_argument);
  CHECK_THROWS_AS(bce_loss(Var::constant(logits), one_hot({0, 1}, 2)), std::invalid_argument);
  CHECK_THROWS_AS(one_hot({2}, 2), std::invalid_argument);
}

TEST_CASE("Adam") {
  SUBCASE("three-step trace against a hand evaluation of the recurrence") {
    std::vector<Tensor> p{Tensor::scalar(1.0)};
    AdamState state = AdamState::zeros_like(p);
    AdamConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.01;
    const double expected[] = {0.90000000196078427528, 0.86336413807018175067, 0.82308472176679402154};
    const double grads[] = {0.5, -0.2, 0.1};
    for (int k = 0; k < 3; ++k) {
      adam_step(p, {Tensor::scalar(grads[k])}, state, cfg);
      CHECK(p[0].item() == doctest::Approx(expected[k]).epsilon(1e-14));
    }
    CHECK(state.step == 3);
  }
  SUBCASE("first step moves by about lr") {
    std::vector<Tensor> p{Tensor(Shape{2}, {1.0, 1.0})};
    AdamState state = AdamState::zeros_like(p);
    AdamConfig cfg;
    cfg.weight_decay = 0;
    adam_step(p, {Tensor(Shape{2}, {3.0, -40.0})}, state, cfg);
    CHECK(p[0][0] == doctest::Approx(1.0 - cfg.lr));
    CHECK(p[0][1] == doctest::Approx(1.0 + cfg.lr));
  }
  SUBCASE("zero gradient and zero decay leave parameters unchanged") {
    std::vector<Tensor> p{Tensor(Shape{3}, {1, -2, 3})};
    const Tensor before = p[0];
    AdamState state = AdamState::zeros_like(p);
    AdamConfig cfg;
    cfg.weight_decay = 0;
    adam_step(p, {Tensor(Shape{3})}, state, cfg);
    CHECK(p[0] == before);
  }
  SUBCASE("decoupled decay shrinks the weights directly") {
    std::vector<Tensor> p{Tensor(Shape{2}, {2, -4})};
    AdamState state = AdamState::zeros_like(p);
    AdamConfig cfg;
    cfg.decoupled_weight_decay = true;
    adam_step(p, {Tensor(Shape{2})}, state, cfg);
    CHECK(p[0][0] == 2 * (1 - cfg.lr * cfg.weight_decay));
    CHECK(p[0][1] == -4 * (1 - cfg.lr * cfg.weight_decay));
  }
  SUBCASE("frozen parameters and errors") {
    std::vector<Tensor> p{Tensor::scalar(1.0), Tensor::scalar(1.0)};
    AdamState state = AdamState::zeros_like(p);
    adam_step(p, {Tensor::scalar(1.0), Tensor::scalar(1.0)}, state, {}, {true, false});
    CHECK(p[0].item() == 1.0);
    CHECK(p[1].item() < 1.0);
    Tensor bad = Tensor::scalar(0);
    bad[0] = std::nan("");
    CHECK_THROWS_AS(adam_step(p, {bad, bad}, state, {}), std::domain_error);
    CHECK_THROWS_AS(adam_step(p, {bad}, state, {}), std::invalid_argument);
  }
}

TEST_CASE("training") {
  const LabeledData data = small_green_set(64, 3);
  const Model init = build_toy_model(9);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.epochs = 2;

  SUBCASE("zero epochs returns the initialization") {
    cfg.epochs = 0;
    const Checkpoint c = train(init, data, cfg);
    for (std::size_t i = 0; i < init.weights.size(); ++i) CHECK(c.model.weights[i] == init.weights[i]);
    CHECK(c.meta.epoch_losses.empty());
  }
  SUBCASE("fixed seed gives a bit-identical checkpoint") {
    const Checkpoint a = train(init, data, cfg), b = train(init, data, cfg);
    CHECK(checkpoint_to_json(a).dump() == checkpoint_to_json(b).dump());
    CHECK(a.meta.epoch_losses.size() == 2);
    cfg.seed = 1;
    CHECK_FALSE(checkpoint_to_json(train(init, data, cfg)).dump() == checkpoint_to_json(a).dump());
  }
  SUBCASE("frozen kernels do not move") {
    const Model r = build_reichardt_model();
    MotionConfig mc;
    const LabeledData motion = to_labeled(motion_pairs(gen_motion(mc)));
    const Checkpoint c = train(r, motion, cfg);
    for (std::size_t i = 0; i < r.weights.size(); ++i) CHECK(c.model.weights[i] == r.weights[i]);
  }
  SUBCASE("divergence is reported as a failed run") {
    cfg.extra_loss = [](std::span<const Var> w, const LabeledData&) { return exp((sum(w[0] * w[0]) + 1.0) * 1e6); };
    const Checkpoint c = train(init, data, cfg);
    CHECK(c.meta.failed);
    CHECK_FALSE(c.meta.failure.empty());
  }
  SUBCASE("empty dataset is rejected") {
    LabeledData empty;
    CHECK_THROWS_AS(train(init, empty, cfg), std::invalid_argument);
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const LabeledData data = small_green_set(32, 5);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  const Checkpoint c = train(build_bias_model(3), data, cfg);
  const auto path = std::filesystem::temp_directory_path() / "absentia_test_checkpoint.json";
  save_checkpoint(path, c);
  const Checkpoint back = load_checkpoint(path);
  std::filesystem::remove(path);
  CHECK(predict(back.model, data.images) == predict(c.model, data.images));
  CHECK(back.meta.epoch_losses == c.meta.epoch_losses);
  CHECK(back.meta.seed == c.meta.seed);

  json j = checkpoint_to_json(c);
  j["version"] = 99;
  CHECK_THROWS_AS(checkpoint_from_json(j), std::invalid_argument);
  j = checkpoint_to_json(c);
  j["weights"].erase(0);
  CHECK_THROWS_AS(checkpoint_from_json(j), std::invalid_argument);
}
