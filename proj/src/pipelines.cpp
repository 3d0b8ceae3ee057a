#include "absentia/debias.hpp"
#include "absentia/featviz.hpp"
#include "absentia/intervention.hpp"
#include "absentia/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace absentia {

namespace fs = std::filesystem;

ExperimentManifest default_manifest(const std::string& experiment) {
  ExperimentManifest m;
  m.experiment = experiment;
  m.out = fs::path("runs") / experiment;
  if (experiment == "reichardt") {
    m.config = {{"data_seed", 0}, {"sequences", 50}, {"frames", 5}, {"width", 16}, {"height", 4},
                {"steps", 64},    {"patch", 4},      {"stride", 1}, {"top_k", 8},  {"k_images", 20}};
  } else if (experiment == "toy") {
    m.config = {{"data_seed", 0},  {"train_size", kGreenPixelTrainSize}, {"test_size", kGreenPixelTestSize},
                {"epochs", 15},    {"batch_size", 256},                   {"lr", 0.01},
                {"weight_decay", 1e-4}, {"decoupled_weight_decay", true}, {"steps", 64},
                {"completeness_steps", 128}, {"completeness_samples", 100}, {"concept_samples", 20},
                {"synthesis_steps", 200}};
    m.seeds = {0, 1, 2, 3, 4};
  } else if (experiment == "intervention") {
    m.config = {{"data_seed", 0}, {"train_size", 1000}, {"dataset_size", 400}, {"epochs", 20},
                {"batch_size", 32}, {"lr", 0.01},      {"weight_decay", 1e-4}, {"layer", 2},
                {"patch", 8},      {"stride", 4},       {"k_images", 20},       {"candidates", 8}};
    m.seeds = {0};
  } else if (experiment == "debias") {
    m.config = {{"data_seed", 0},  {"train_size", 1000},  {"val_size", 400},     {"epochs", 20},
                {"batch_size", 32}, {"lr", 0.01},         {"weight_decay", 1e-4}, {"grid", {10.0}},
                {"prior_steps", 1}, {"attr_steps", 1}};
    m.seeds = {0, 1, 2, 3, 4};
  } else {
    throw std::invalid_argument("unknown experiment '" + experiment + "' (reichardt | toy | intervention | debias)");
  }
  return m;
}

namespace {

template <typename F>
auto stage(const std::string& name, F&& body) {
  try {
    return body();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  void image(const std::string& name, const RgbImage& im) {
    write_ppm(dir_ / name, im);
    files_.push_back(dir_ / name);
  }
  void heatmap(const std::string& name, const Tensor& values, int scale) {
    image(name, upscale(render_heatmap(values), scale));
  }
  void text(const std::string& name, const std::string& body) {
    write_text_file(dir_ / name, body);
    files_.push_back(dir_ / name);
  }
  void json_file(const std::string& name, const json& j) {
    write_json_file(dir_ / name, j);
    files_.push_back(dir_ / name);
  }
  std::vector<fs::path> files() const { return files_; }

 private:
  fs::path dir_;
  std::vector<fs::path> files_;
};

RgbImage picture(const Tensor& chw, int scale) { return upscale(tensor_to_rgb(chw), scale); }

Tensor sample_image(const Tensor& batch, Index i) {
  const Index inner = batch.numel() / batch.dim(0);
  return Tensor(Shape{batch.dim(1), batch.dim(2), batch.dim(3)}, batch.data().segment(i * inner, inner));
}

std::vector<double> column(const Tensor& logits, Index k) {
  std::vector<double> out;
  for (Index i = 0; i < logits.dim(0); ++i) out.push_back(logits[i * logits.dim(1) + k]);
  return out;
}

json patch_list_json(const std::vector<PatchRecord>& patches) {
  json out = json::array();
  for (const PatchRecord& r : patches)
    out.push_back({{"sample_id", r.sample_id}, {"row", r.row}, {"col", r.col}, {"size", r.size},
                   {"activation", r.activation}, {"rank", r.rank}});
  return out;
}

RgbImage patch_gallery(const std::vector<Sample>& samples, const std::vector<PatchRecord>& patches, int scale) {
  std::vector<RgbImage> tiles;
  for (const PatchRecord& r : patches)
    tiles.push_back(picture(crop(samples[static_cast<std::size_t>(r.sample_id)].image, r.row, r.col, r.size), scale));
  return tile_images(tiles, 8, 2);
}

bool all_true(const json& checks) {
  return std::all_of(checks.begin(), checks.end(), [](const json& v) { return v.get<bool>(); });
}

// 2 x H x 4 stimulus of a column stepping one pixel to the left.
Tensor leftward_patch(Index height) {
  Tensor p(Shape{2, height, 4});
  for (Index y = 0; y < height; ++y) {
    p.at3(0, y, 2) = 1.0;
    p.at3(1, y, 1) = 1.0;
  }
  return p;
}

// ---- Reichardt detector ----------------------------------------------------------------

json run_reichardt(const ExperimentManifest& m, const json& cfg, Outputs& out) {
  const auto seed = cfg.at("data_seed").get<std::uint64_t>();
  const json motion = {{"frames", cfg.at("frames")}, {"width", cfg.at("width")}, {"height", cfg.at("height")}};
  const Index sequences = cfg.at("sequences").get<Index>();
  const int steps = cfg.at("steps").get<int>();
  json l2r_params = motion, bidir_params = motion;
  l2r_params["kinds"] = "l2r";
  bidir_params["kinds"] = "bidir";
  const auto [l2r, bidir] = stage("reichardt/data", [&] {
    return std::pair{generate({"motion", sequences, seed, l2r_params}), generate({"motion", sequences, seed, bidir_params})};
  });
  const Model model = build_reichardt_model();
  const NeuronRef out1{3, 0, std::nullopt};

  json report;
  json checks;
  stage("reichardt/outputs", [&] {
    const Tensor a = predict(model, to_labeled(l2r).images);
    const Tensor b = predict(model, to_labeled(bidir).images);
    const std::vector<double> l2r_out1 = column(a, 0), bidir_out1 = column(b, 0);
    double max_abs = 0.0;
    for (double v : bidir_out1) max_abs = std::max(max_abs, std::abs(v));
    report["outputs"] = {{"l2r", {{"output1", l2r_out1}, {"output2", column(a, 1)}}},
                         {"bidir", {{"output1", bidir_out1}, {"output2", column(b, 1)}}},
                         {"l2r_min_output1", *std::min_element(l2r_out1.begin(), l2r_out1.end())},
                         {"bidir_max_abs_output1", max_abs}};
    checks["l2r_output1_positive"] = *std::min_element(l2r_out1.begin(), l2r_out1.end()) > 0.0;
    checks["bidir_output1_zero"] = max_abs < 1e-9;
    return 0;
  });

  stage("reichardt/attribution", [&] {
    AttributionConfig ac;
    ac.steps = steps;
    const LabeledData data = to_labeled(bidir);
    const std::vector<int> targets(static_cast<std::size_t>(data.size()), 0);
    const BatchAttribution nt = attribute_outputs(model, data.images, targets, ac);
    std::vector<double> r2l_sums;
    for (std::size_t i = 0; i < bidir.size(); ++i) {
      const Tensor values = sample_image(nt.values, static_cast<Index>(i));
      r2l_sums.push_back((values.data() * bidir[i].concept_of("r2l")->mask.data()).sum());
    }
    const double worst = *std::max_element(r2l_sums.begin(), r2l_sums.end());
    report["non_target_r2l_sum"] = {{"per_sample", r2l_sums}, {"max", worst}};
    checks["non_target_r2l_negative"] = worst < 0.0;

    const Tensor& l2r_x = l2r.front().image;
    const Tensor& bidir_x = bidir.front().image;
    const std::vector<std::pair<std::string, AttributionMap>> maps{
        {"l2r_target_output1", integrated_gradients(model, l2r_x, 0, ac)},
        {"l2r_nontarget_output2", non_target_attribution(model, l2r_x, 0, ac)},
        {"bidir_target_output2", integrated_gradients(model, bidir_x, 1, ac)},
        {"bidir_nontarget_output1", non_target_attribution(model, bidir_x, 1, ac)}};
    for (const auto& [name, map] : maps) {
      out.heatmap(name + ".ppm", map.values, 16);
      report["attributions"][name] = attribution_map_to_json(map);
    }
    out.image("l2r_input.ppm", picture(l2r_x, 16));
    out.image("bidir_input.ppm", picture(bidir_x, 16));
    return 0;
  });

  std::vector<Sample> mixed = l2r;
  for (const Sample& s : bidir) {
    mixed.push_back(s);
    mixed.back().id = static_cast<Index>(mixed.size()) - 1;
  }
  stage("reichardt/featviz", [&] {
    const int patch = cfg.at("patch").get<int>(), stride = cfg.at("stride").get<int>();
    const Index k = cfg.at("top_k").get<Index>();
    const auto min = extreme_patches(model, mixed, out1, patch, stride, k, PatchMode::min);
    const auto max = extreme_patches(model, mixed, out1, patch, stride, k, PatchMode::max);
    report["patches"] = {{"output1_min", patch_list_json(min)}, {"output1_max", patch_list_json(max)}};
    checks["least_activating_patch_negative"] = min.front().activation < 0.0;
    out.image("output1_min_patches.ppm", patch_gallery(mixed, min, 16));
    out.image("output1_max_patches.ppm", patch_gallery(mixed, max, 16));
    return 0;
  });

  stage("reichardt/intervention", [&] {
    const Index height = cfg.at("height").get<Index>();
    InterventionConfig ic;
    ic.patch = 4;
    ic.stride = 1;
    ic.k_images = cfg.at("k_images").get<Index>();
    ic.seed = seed;
    ic.inhibitor_patches = std::vector<Tensor>{leftward_patch(height)};
    const InterventionReport r = run_intervention(model, mixed, 3, ic);
    report["intervention"] = intervention_report_to_json(r);

    // Leftward motion written into an empty stretch of a rightward stimulus.
    const Tensor& x = l2r.front().image;
    const Index w = x.dim(2);
    int col = -1;
    for (int c = 0; c + 4 <= w && col < 0; ++c) {
      bool empty = true;
      for (Index ch = 0; ch < 2; ++ch)
        for (Index y = 0; y < height; ++y)
          for (int dx = -1; dx <= 4; ++dx)
            if (c + dx >= 0 && c + dx < w && x.at3(ch, y, c + dx) != 0.0) empty = false;
      if (empty) col = c;
    }
    if (col < 0) throw std::runtime_error("no empty region for the concept patch");
    AttributionConfig ac;
    ac.steps = steps;
    const ConceptIntervention ci = controlled_concept_intervention(model, x, leftward_patch(height), 0, col, 0, ac);
    report["concept_intervention"] = {{"column", col},
                                      {"negative_before", ci.negative_before},
                                      {"negative_after", ci.negative_after},
                                      {"delta", ci.delta}};
    checks["concept_insertion_increases_negative_mass"] = ci.delta > 0.0;
    out.heatmap("concept_before.ppm", ci.before.values, 16);
    out.heatmap("concept_after.ppm", ci.after.values, 16);
    return 0;
  });

  report["checks"] = checks;
  (void)m;
  return report;
}

// ---- green-pixel toy ---------------------------------------------------------------------

json run_toy(const ExperimentManifest& m, const json& cfg, Outputs& out) {
  if (m.seeds.empty()) throw StageError("toy/config", "at least one training seed required");
  const auto seed = cfg.at("data_seed").get<std::uint64_t>();
  const auto [train_set, test_set] = stage("toy/data", [&] {
    return std::pair{gen_green_pixel(cfg.at("train_size").get<Index>(), seed),
                     gen_green_pixel(cfg.at("test_size").get<Index>(), seed + 1)};
  });
  const LabeledData train_data = to_labeled(train_set), test_data = to_labeled(test_set);

  json report, checks;
  Checkpoint best;
  double best_acc = -1.0;
  stage("toy/train", [&] {
    json runs = json::array();
    for (std::uint64_t s : m.seeds) {
      TrainConfig tc{.lr = cfg.at("lr").get<double>(),
                     .weight_decay = cfg.at("weight_decay").get<double>(),
                     .decoupled_weight_decay = cfg.at("decoupled_weight_decay").get<bool>(),
                     .epochs = cfg.at("epochs").get<int>(),
                     .batch_size = cfg.at("batch_size").get<Index>(),
                     .seed = s,
                     .extra_loss = {}};
      Checkpoint ck = train(build_toy_model(s), train_data, tc);
      const double acc = ck.meta.failed ? 0.0 : accuracy(ck.model, test_data);
      runs.push_back({{"seed", s}, {"test_accuracy", acc}, {"failed", ck.meta.failed},
                      {"epoch_losses", ck.meta.epoch_losses}});
      if (!ck.meta.failed && acc > best_acc) {
        best_acc = acc;
        best = std::move(ck);
      }
    }
    if (best_acc < 0.0) throw std::runtime_error("every training run failed");
    report["runs"] = runs;
    report["best"] = {{"seed", best.meta.seed}, {"test_accuracy", best_acc}};
    checks["best_accuracy_at_least_0.98"] = best_acc >= 0.98;
    out.json_file("best_checkpoint.json", checkpoint_to_json(best));
    return 0;
  });
  const Model& model = best.model;

  stage("toy/logits", [&] {
    const Tensor logits = predict(model, test_data.images);
    std::array<std::array<double, 2>, 2> mean{};
    std::array<double, 2> count{};
    for (Index i = 0; i < test_data.size(); ++i) {
      const auto label = static_cast<std::size_t>(test_data.labels[static_cast<std::size_t>(i)]);
      count[label] += 1;
      for (std::size_t k = 0; k < 2; ++k) mean[label][k] += logits[i * 2 + static_cast<Index>(k)];
    }
    for (std::size_t c = 0; c < 2; ++c)
      for (double& v : mean[c]) v /= count[c];
    report["mean_logits"] = {{"class1", mean[0]}, {"class2", mean[1]}};
    checks["mean_logit_signs"] = mean[0][0] > 0 && mean[0][1] < 0 && mean[1][0] < 0 && mean[1][1] > 0;
    out.text("mean_logits.csv", "class,logit1,logit2\nclass1," + json(mean[0][0]).dump() + "," +
                                    json(mean[0][1]).dump() + "\nclass2," + json(mean[1][0]).dump() + "," +
                                    json(mean[1][1]).dump() + "\n");
    return 0;
  });

  const int steps = cfg.at("steps").get<int>();
  stage("toy/non_target", [&] {
    std::vector<Index> rows;
    for (Index i = 0; i < test_data.size(); ++i)
      if (test_data.labels[static_cast<std::size_t>(i)] == 0) rows.push_back(i);
    const LabeledData present = test_data.gather(rows);
    AttributionConfig ac;
    ac.steps = steps;
    const BatchAttribution a =
        attribute_outputs(model, present.images, std::vector<int>(rows.size(), 1), ac);
    Index hits = 0;
    for (std::size_t j = 0; j < rows.size(); ++j) {
      const Tensor values = sample_image(a.values, static_cast<Index>(j));
      Index arg = 0;
      values.data().minCoeff(&arg);
      const Index plane = values.dim(1) * values.dim(2);
      const Tensor& green = test_set[static_cast<std::size_t>(rows[j])].concept_of("green")->mask;
      hits += green[arg % plane] > 0.0 || (green.numel() > plane && green[arg] > 0.0);
    }
    const double fraction = static_cast<double>(hits) / static_cast<double>(rows.size());
    report["non_target_green_fraction"] = fraction;
    checks["non_target_minimum_at_green_pixel"] = fraction >= 0.95;

    const Tensor& x1 = test_set[static_cast<std::size_t>(rows.front())].image;
    const Sample& s2 = *std::find_if(test_set.begin(), test_set.end(), [](const Sample& s) { return s.label == 1; });
    const std::vector<std::pair<std::string, AttributionMap>> maps{
        {"class1_target_output1", integrated_gradients(model, x1, 0, ac)},
        {"class1_nontarget_output2", non_target_attribution(model, x1, 0, ac)},
        {"class2_target_output2", integrated_gradients(model, s2.image, 1, ac)},
        {"class2_nontarget_output1", non_target_attribution(model, s2.image, 1, ac)}};
    for (const auto& [name, map] : maps) {
      out.heatmap(name + ".ppm", map.values, 8);
      report["attributions"][name] = {{"output", map.output}, {"completeness_gap", map.completeness_gap}};
    }
    out.image("class1_input.ppm", picture(x1, 8));
    out.image("class2_input.ppm", picture(s2.image, 8));
    return 0;
  });

  stage("toy/completeness", [&] {
    const Index n = std::min(cfg.at("completeness_samples").get<Index>(), test_data.size());
    std::vector<Index> rows(static_cast<std::size_t>(n));
    std::iota(rows.begin(), rows.end(), Index{0});
    const LabeledData subset = test_data.gather(rows);
    AttributionConfig ac;
    ac.steps = cfg.at("completeness_steps").get<int>();
    const BatchAttribution a = attribute_outputs(model, subset.images, subset.labels, ac);
    double worst = 0.0;
    bool ok = true;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double delta = std::abs(a.outputs[i] - a.baseline_outputs[i]);
      ok = ok && std::abs(a.gaps[i]) <= 1e-3 * delta + 1e-6;
      worst = std::max(worst, std::abs(a.gaps[i]) / std::max(delta, 1e-300));
    }
    report["completeness"] = {{"samples", n}, {"steps", ac.steps}, {"max_relative_gap", worst}};
    checks["completeness"] = ok;
    return 0;
  });

  stage("toy/concept_intervention", [&] {
    AttributionConfig ac;
    ac.steps = steps;
    const Tensor green(Shape{3, 1, 1}, {0.0, 1.0, 0.0});
    std::vector<double> deltas;
    for (const Sample& s : test_set) {
      if (s.label != 1) continue;
      if (static_cast<Index>(deltas.size()) >= cfg.at("concept_samples").get<Index>()) break;
      deltas.push_back(controlled_concept_intervention(model, s.image, green, 16, 16, 1, ac).delta);
    }
    report["concept_intervention"] = {{"deltas", deltas}, {"row", 16}, {"col", 16}};
    checks["concept_insertion_increases_negative_mass"] =
        !deltas.empty() && std::all_of(deltas.begin(), deltas.end(), [](double d) { return d > 0.0; });
    return 0;
  });

  stage("toy/featviz", [&] {
    SynthesisConfig sc;
    sc.steps = cfg.at("synthesis_steps").get<int>();
    sc.seed = seed;
    json synth;
    for (Index k = 0; k < 2; ++k) {
      const SynthesisResult r = minimize_input(model, NeuronRef{3, k, std::nullopt}, {3, 32, 32}, sc);
      const std::string name = "output" + std::to_string(k + 1) + "_minimized";
      out.image(name + ".ppm", picture(r.input, 8));
      synth[name] = {{"initial", r.trace.front()}, {"final", r.trace.back()},
                     {"mean_rgb", {r.input.data().segment(0, 1024).mean(), r.input.data().segment(1024, 1024).mean(),
                                   r.input.data().segment(2048, 1024).mean()}}};
    }
    report["synthesis"] = synth;
    return 0;
  });

  report["checks"] = checks;
  return report;
}

// ---- intervention on the bias model -------------------------------------------------------------

json run_intervention_pipeline(const ExperimentManifest& m, const json& cfg, Outputs& out) {
  if (m.seeds.empty()) throw StageError("intervention/config", "a training seed is required");
  const auto seed = cfg.at("data_seed").get<std::uint64_t>();
  const auto [train_set, dataset] = stage("intervention/data", [&] {
    return std::pair{gen_biased_split(cfg.at("train_size").get<Index>(), BiasMode::training, seed, 0),
                     gen_biased_split(cfg.at("dataset_size").get<Index>(), BiasMode::training, seed, 1)};
  });
  const Checkpoint ck = stage("intervention/train", [&] {
    TrainConfig tc{.lr = cfg.at("lr").get<double>(),
                   .weight_decay = cfg.at("weight_decay").get<double>(),
                   .epochs = cfg.at("epochs").get<int>(),
                   .batch_size = cfg.at("batch_size").get<Index>(),
                   .seed = m.seeds.front(),
                   .extra_loss = {}};
    Checkpoint c = train_bias_model(to_labeled(train_set), tc);
    if (c.meta.failed) throw std::runtime_error("training failed: " + c.meta.failure);
    return c;
  });

  json report, checks;
  stage("intervention/run", [&] {
    InterventionConfig ic;
    ic.k_images = cfg.at("k_images").get<Index>();
    ic.patch = cfg.at("patch").get<int>();
    ic.stride = cfg.at("stride").get<int>();
    ic.candidates = cfg.at("candidates").get<int>();
    ic.seed = seed;
    const InterventionReport r = run_intervention(ck.model, dataset, cfg.at("layer").get<int>(), ic);
    report["intervention"] = intervention_report_to_json(r);
    report["validation_accuracy"] = accuracy(ck.model, to_labeled(dataset));

    // Per-image drops against the unmodified image remove the level
    // differences between images and channels before pooling.
    std::array<std::vector<double>, 4> pooled, drops;
    for (const ChannelIntervention& c : r.channels) {
      const std::array<const ConditionResult*, 4> conds{&c.none, &c.random, &c.least, &c.most};
      for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t i = 0; i < conds[k]->activations.size(); ++i) {
          pooled[k].push_back(conds[k]->activations[i]);
          drops[k].push_back(c.none.activations[i] - conds[k]->activations[i]);
        }
    }
    const auto mean = [](const std::vector<double>& v) {
      return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    const std::array<std::string, 4> names{"none", "random", "least", "most"};
    std::array<double, 4> means{};
    for (std::size_t k = 0; k < 4; ++k) means[k] = mean(pooled[k]);
    const TTest least_t = t_test_ind(drops[2], drops[1]);
    const TTest most_t = t_test_ind(drops[3], drops[1]);
    json pooled_json;
    std::string csv = "condition,mean_activation,mean_drop,t_drop_vs_random,p_drop_vs_random\n";
    for (std::size_t k = 0; k < 4; ++k) {
      pooled_json[names[k]] = {{"mean", means[k]}, {"drop", mean(drops[k])}};
      csv += names[k] + "," + json(means[k]).dump() + "," + json(mean(drops[k])).dump() + ",";
      if (k == 2) csv += json(least_t.t).dump() + "," + json(least_t.p).dump();
      if (k == 3) csv += json(most_t.t).dump() + "," + json(most_t.p).dump();
      if (k < 2) csv += ",";
      csv += "\n";
    }
    pooled_json["least_vs_random"] = {{"t", least_t.t}, {"p", least_t.p}, {"df", least_t.df}};
    pooled_json["most_vs_random"] = {{"t", most_t.t}, {"p", most_t.p}, {"df", most_t.df}};
    report["pooled"] = pooled_json;
    out.text("table1.csv", csv);
    checks["least_below_random"] = means[2] < means[1] && least_t.t > 0.0 && least_t.p < 0.01;
    checks["most_raises_activation"] = means[3] > means[0];
    checks["drop_least_at_least_drop_random"] = mean(drops[2]) >= mean(drops[1]);

    // Galleries for the channel with the strongest inhibition.
    std::size_t strongest = 0;
    for (std::size_t c = 1; c < r.channels.size(); ++c)
      if (r.channels[c].random.mean - r.channels[c].least.mean >
          r.channels[strongest].random.mean - r.channels[strongest].least.mean)
        strongest = c;
    report["gallery_channel"] = strongest;
    out.image("least_patches.ppm", patch_gallery(dataset, r.channels[strongest].least_patches, 4));
    out.image("most_patches.ppm", patch_gallery(dataset, r.channels[strongest].most_patches, 4));
    return 0;
  });
  out.json_file("checkpoint.json", checkpoint_to_json(ck));
  report["checks"] = checks;
  return report;
}

// ---- attribution-prior debiasing -------------------------------------------------------------

json run_debias(const ExperimentManifest& m, const json& cfg, Outputs& out) {
  const auto seed = cfg.at("data_seed").get<std::uint64_t>();
  const Index n_train = cfg.at("train_size").get<Index>(), n_val = cfg.at("val_size").get<Index>();
  const auto [biased, unbiased, validation] = stage("debias/data", [&] {
    std::vector<NamedSplit> val{{"training", gen_biased_split(n_val, BiasMode::training, seed, 1)},
                                {"inverse", gen_biased_split(n_val, BiasMode::inverse, seed, 1)},
                                {"none", gen_biased_split(n_val, BiasMode::none, seed, 1)}};
    return std::tuple{gen_biased_split(n_train, BiasMode::training, seed, 0),
                      gen_biased_split(n_train, BiasMode::none, seed, 0), std::move(val)};
  });

  DebiasConfig base;
  base.grid = cfg.at("grid").get<std::vector<double>>();
  base.seeds = m.seeds;
  base.prior_steps = cfg.at("prior_steps").get<int>();
  base.attr_steps = cfg.at("attr_steps").get<int>();
  base.train = TrainConfig{.lr = cfg.at("lr").get<double>(),
                           .weight_decay = cfg.at("weight_decay").get<double>(),
                           .epochs = cfg.at("epochs").get<int>(),
                           .batch_size = cfg.at("batch_size").get<Index>(),
                           .seed = 0,
                           .extra_loss = {}};

  std::vector<std::pair<std::string, DebiasResult>> results;
  for (PriorKind kind : {PriorKind::none, PriorKind::presence, PriorKind::presence_absence}) {
    DebiasConfig c = base;
    c.prior = kind;
    results.emplace_back(to_string(kind), stage("debias/train_" + to_string(kind), [&] {
                           return train_debiased(biased, validation, c);
                         }));
  }
  results.emplace_back("unbiased_data", stage("debias/train_unbiased", [&] {
                         return train_debiased(unbiased, validation, base);
                       }));

  json report, checks, summary;
  std::map<std::string, std::map<std::string, double>> med;
  for (const auto& [name, r] : results) {
    report["methods"][name] = debias_result_to_json(r);
    std::vector<double> inverse, none, attr;
    for (const DebiasRun* run : r.selected()) {
      inverse.push_back(run->eval.at("inverse").average);
      none.push_back(run->eval.at("none").average);
      attr.push_back(run->eval.at("training").attr.value_or(0.0));
    }
    if (inverse.empty()) throw StageError("debias/summary", "no successful runs for " + name);
    med[name] = {{"inverse_avg", median(inverse)}, {"none_avg", median(none)}, {"training_attr", median(attr)}};
    summary[name] = {{"median_inverse_avg", med[name]["inverse_avg"]},
                     {"median_none_avg", med[name]["none_avg"]},
                     {"median_training_attr", med[name]["training_attr"]},
                     {"selected_lambda", r.selected_lambda}};
  }
  report["summary"] = summary;
  checks["inverse_avg_ordering"] = med["presence_absence"]["inverse_avg"] > med["presence"]["inverse_avg"] &&
                                   med["presence"]["inverse_avg"] > med["none"]["inverse_avg"];
  checks["attr_ordering"] = med["none"]["training_attr"] > med["presence"]["training_attr"] &&
                            med["presence"]["training_attr"] >= med["presence_absence"]["training_attr"];
  checks["presence_absence_matches_unbiased"] =
      std::abs(med["presence_absence"]["none_avg"] - med["unbiased_data"]["none_avg"]) <= 0.05;

  std::vector<std::pair<std::string, const DebiasResult*>> rows;
  for (const auto& [name, r] : results) rows.emplace_back(name, &r);
  out.text("table2.csv", bias_table_csv(rows));
  report["checks"] = checks;
  return report;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentManifest& manifest) {
  json cfg = default_manifest(manifest.experiment).config;
  cfg.merge_patch(manifest.config);
  ExperimentManifest resolved = manifest;
  resolved.config = cfg;
  Outputs out(manifest.out);

  json report;
  if (manifest.experiment == "reichardt")
    report = run_reichardt(resolved, cfg, out);
  else if (manifest.experiment == "toy")
    report = run_toy(resolved, cfg, out);
  else if (manifest.experiment == "intervention")
    report = run_intervention_pipeline(resolved, cfg, out);
  else if (manifest.experiment == "debias")
    report = run_debias(resolved, cfg, out);
  else
    throw StageError("manifest", "unknown experiment '" + manifest.experiment + "'");

  report["experiment"] = manifest.experiment;
  report["manifest"] = manifest_to_json(resolved);
  ExperimentResult result;
  result.passed = all_true(report.at("checks"));
  report["passed"] = result.passed;
  out.json_file("report.json", report);
  result.report = std::move(report);
  result.files = out.files();
  return result;
}

}  // namespace absentia
