#include "absentia/debias.hpp"
#include "gradcheck.hpp"

#include <doctest.h>

#include <cmath>

using namespace absentia;
using absentia::testing::numeric_gradient;
using absentia::testing::random_tensor;
using absentia::testing::relative_error;

namespace {

// Bias-model layout on 8x8 inputs with a 3x3 mask in the top-left corner of
// the first image only.
struct Fixture {
  Model model = build_bias_model(3);
  Tensor images;
  Tensor masks;
  std::vector<int> labels{0, 1, 0};

  Fixture() {
    std::mt19937_64 rng(5);
    images = random_tensor({3, 3, 8, 8}, rng, 0.0, 1.0);
    masks = Tensor(Shape{3, 8, 8});
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) masks[y * 8 + x] = 1.0;
    masks[2 * 64 + 7 * 8 + 7] = 1.0;
  }
};

double prior_value(const Model& model, const Fixture& f, const PriorConfig& cfg) {
  const std::vector<Var> w = model.constants();
  return attribution_prior(model.spec, w, f.images, f.labels, f.masks, cfg).item();
}

}  // namespace

TEST_CASE("prior terms") {
  Fixture f;
  const PriorConfig presence{PriorKind::presence, 3.0, 4, IntegrationRule::midpoint};
  const PriorConfig both{PriorKind::presence_absence, 3.0, 4, IntegrationRule::midpoint};

  SUBCASE("empty masks give exactly zero") {
    Fixture empty;
    empty.masks.data().setZero();
    CHECK(prior_value(empty.model, empty, presence) == 0.0);
    CHECK(prior_value(empty.model, empty, both) == 0.0);
  }
  SUBCASE("zero weights give exactly zero") {
    Model zero = f.model;
    for (Tensor& w : zero.weights) w.data().setZero();
    CHECK(prior_value(zero, f, presence) == 0.0);
    CHECK(prior_value(zero, f, both) == 0.0);
  }
  SUBCASE("none is an exact zero and adds no training hook") {
    CHECK(prior_value(f.model, f, {PriorKind::none, 0.0, 4, IntegrationRule::midpoint}) == 0.0);
    CHECK_FALSE(prior_loss(f.model.spec, {PriorKind::none, 0.0, 8, IntegrationRule::midpoint}));
  }
  SUBCASE("non-negative and linear in lambda") {
    const double p = prior_value(f.model, f, presence);
    CHECK(p > 0.0);
    CHECK(prior_value(f.model, f, both) > 0.0);
    PriorConfig doubled = presence;
    doubled.lambda = 6.0;
    CHECK(prior_value(f.model, f, doubled) == doctest::Approx(2.0 * p).epsilon(1e-14));
  }
  SUBCASE("matches a direct evaluation from the attribution maps") {
    double expected = 0.0;
    for (int n : {0, 2}) {
      Tensor x(Shape{3, 8, 8}, f.images.data().segment(n * 192, 192));
      AttributionConfig cfg;
      cfg.steps = 4;
      const Tensor a = integrated_gradients(f.model, x, f.labels[static_cast<std::size_t>(n)], cfg).values;
      const Tensor mask(Shape{8, 8}, f.masks.data().segment(n * 64, 64));
      double total = 0.0;
      for (Index c = 0; c < 3; ++c)
        for (Index i = 0; i < 64; ++i) total += mask[i] * (std::sqrt(a[c * 64 + i] * a[c * 64 + i] + 1e-12) - 1e-6);
      expected += total / (mask.data().sum() + 1e-5);
    }
    CHECK(prior_value(f.model, f, presence) == doctest::Approx(2.0 * 3.0 * expected / 3.0).epsilon(1e-12));
  }
  SUBCASE("mirrored outputs make both priors agree") {
    Model mirrored = f.model;
    Tensor& head = mirrored.weights[2];
    for (Index c = 0; c < 8; ++c) head[8 + c] = -head[c];
    CHECK(prior_value(mirrored, f, both) == doctest::Approx(prior_value(mirrored, f, presence)).epsilon(1e-12));
  }
  SUBCASE("step count does not matter for a bias-free ReLU network at the zero baseline") {
    PriorConfig one = presence;
    one.steps = 1;
    CHECK(prior_value(f.model, f, one) == doctest::Approx(prior_value(f.model, f, presence)).epsilon(1e-12));
  }
  SUBCASE("gradient with respect to the weights matches finite differences") {
    for (const PriorConfig& cfg : {presence, both}) {
      const std::vector<Var> w = f.model.parameters();
      const Var loss = attribution_prior(f.model.spec, w, f.images, f.labels, f.masks, cfg);
      const std::vector<Var> g = grad(loss, w);
      for (std::size_t k = 0; k < w.size(); ++k) {
        const Tensor numeric = numeric_gradient(
            [&](const Tensor& probe) {
              Model m = f.model;
              m.weights[k] = probe;
              return prior_value(m, f, cfg);
            },
            f.model.weights[k], 1e-4);
        CHECK(relative_error(g[k].value(), numeric) <= 1e-4);
      }
    }
  }
  CHECK_THROWS_AS(prior_value(f.model, f, {PriorKind::presence, 0.0, 4, IntegrationRule::midpoint}),
                  std::invalid_argument);
  Fixture bad;
  bad.masks = Tensor(Shape{3, 7, 8});
  CHECK_THROWS_AS(prior_value(bad.model, bad, presence), std::invalid_argument);
  CHECK(parse_prior_kind("presence_absence") == PriorKind::presence_absence);
  CHECK_THROWS_AS(parse_prior_kind("absence"), std::invalid_argument);
}

TEST_CASE("bias split evaluation") {
  const std::vector<NamedSplit> splits{{"training", gen_biased_split(40, BiasMode::training, 1, 1)},
                                       {"none", gen_biased_split(40, BiasMode::none, 1, 1)}};
  const Model m = build_bias_model(2);
  const BiasEvalReport r = evaluate_bias_splits(m, splits, 4);
  const std::vector<int> pred = argmax_rows(predict(m, to_labeled(splits[0].samples).images));
  double hits0 = 0;
  for (std::size_t i = 0; i < pred.size(); i += 2) hits0 += pred[i] == 0;
  CHECK(r.at("training").class_accuracy[0] == doctest::Approx(hits0 / 20));
  for (const SplitEvaluation& s : r.splits) {
    CHECK(s.average == doctest::Approx(0.5 * (s.class_accuracy[0] + s.class_accuracy[1])));
    for (double a : s.class_accuracy) CHECK((a >= 0.0 && a <= 1.0));
  }
  REQUIRE(r.at("training").attr.has_value());
  CHECK(*r.at("training").attr >= 0.0);
  CHECK(*r.at("training").attr <= 1.0);
  CHECK(r.at("training").masked == 20);
  CHECK_FALSE(r.at("none").attr.has_value());
  // Positive homogeneity: with the zero baseline one midpoint step is exact.
  CHECK(*evaluate_bias_splits(m, splits, 1).at("training").attr == doctest::Approx(*r.at("training").attr).epsilon(1e-12));
  CHECK_THROWS_AS(r.at("inverse"), std::out_of_range);
  CHECK_THROWS_AS(evaluate_bias_splits(m, {{"empty", {}}}), std::invalid_argument);
}

TEST_CASE("grid training") {
  const std::vector<Sample> train = gen_biased_split(24, BiasMode::training, 4, 0);
  const std::vector<NamedSplit> val{{"training", gen_biased_split(8, BiasMode::training, 4, 1)},
                                    {"inverse", gen_biased_split(8, BiasMode::inverse, 4, 1)},
                                    {"none", gen_biased_split(8, BiasMode::none, 4, 1)}};
  DebiasConfig cfg;
  cfg.seeds = {0, 1};
  cfg.attr_steps = 2;
  cfg.train.epochs = 1;
  cfg.train.batch_size = 8;

  SUBCASE("no prior reproduces plain training") {
    cfg.max_attempts = 1;
    const DebiasResult r = train_debiased(train, val, cfg);
    REQUIRE(r.runs.size() == 2);
    TrainConfig plain = cfg.train;
    plain.seed = 1;
    const Checkpoint direct = absentia::train(build_bias_model(1), to_labeled(train), plain);
    CHECK(direct.model.weights == r.runs[1].checkpoint.model.weights);
    CHECK(r.selected().size() == 2);
  }
  SUBCASE("full grid, lambda chosen by no-bias accuracy, deterministic") {
    cfg.prior = PriorKind::presence_absence;
    cfg.grid = {1.0, 100.0};
    cfg.prior_steps = 1;
    const DebiasResult a = train_debiased(train, val, cfg);
    CHECK(a.runs.size() == 4);
    double best = -1.0, chosen = 0.0;
    for (double lambda : cfg.grid) {
      double total = 0.0;
      for (const DebiasRun& run : a.runs)
        if (run.lambda == lambda) total += run.eval.at("none").average;
      if (total > best) best = total, chosen = lambda;
    }
    CHECK(a.selected_lambda == chosen);
    const DebiasResult b = train_debiased(train, val, cfg);
    CHECK(debias_result_to_json(a).dump() == debias_result_to_json(b).dump());

    const std::string csv = bias_table_csv({{"presence_absence", &a}});
    CHECK(csv.rfind("method,lambda,training_class0", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
  }
  SUBCASE("constant predictors are retrained from a derived seed") {
    const DebiasResult once = [&] {
      DebiasConfig c = cfg;
      c.max_attempts = 1;
      return train_debiased(train, val, c);
    }();
    const DebiasResult retried = train_debiased(train, val, cfg);
    const LabeledData data = to_labeled(train);
    int restarted = 0;
    for (std::size_t i = 0; i < once.runs.size(); ++i) {
      const std::vector<int> pred = argmax_rows(predict(once.runs[i].checkpoint.model, data.images));
      const bool constant = std::all_of(pred.begin(), pred.end(), [&](int p) { return p == pred.front(); });
      const int restarts = retried.runs[i].checkpoint.meta.extra.at("restarts").get<int>();
      CHECK(constant == (restarts > 0));
      restarted += restarts > 0;
      if (!constant) CHECK(once.runs[i].checkpoint.model.weights == retried.runs[i].checkpoint.model.weights);
    }
    CHECK(restarted > 0);
  }
  SUBCASE("configuration errors") {
    cfg.prior = PriorKind::presence;
    cfg.grid = {};
    CHECK_THROWS_AS(train_debiased(train, val, cfg), std::invalid_argument);
    cfg.grid = {1.0};
    CHECK_THROWS_AS(train_debiased(train, {val[0]}, cfg), std::invalid_argument);
  }
}

TEST_CASE("median") {
  CHECK(median({3, 1, 2}) == 2.0);
  CHECK(median({4, 1, 2, 3}) == 2.5);
  CHECK_THROWS_AS(median({}), std::invalid_argument);
}
