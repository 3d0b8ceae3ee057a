#include "absentia/debias.hpp"
#include "absentia/featviz.hpp"
#include "absentia/intervention.hpp"
#include "absentia/parallel.hpp"
#include "absentia/report.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

using namespace absentia;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::string out;
  int threads = 1;
};

// "key=value" with the value read as JSON when it parses, as a string otherwise.
json parse_assignments(const std::vector<std::string>& items) {
  json j = json::object();
  for (const std::string& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw CLI::ValidationError("expected key=value, got '" + item + "'");
    const std::string value = item.substr(eq + 1);
    j[item.substr(0, eq)] = json::accept(value) ? json::parse(value) : json(value);
  }
  return j;
}

fs::path out_or(const Globals& g, const std::string& fallback) { return g.out.empty() ? fs::path(fallback) : fs::path(g.out); }

Model load_model(const std::string& checkpoint) {
  if (checkpoint == "reichardt") return build_reichardt_model();
  return load_checkpoint(checkpoint).model;
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

fs::path with_extension(fs::path path, const std::string& ext) { return path.replace_extension(ext); }

json patches_json(const std::vector<PatchRecord>& records) {
  json out = json::array();
  for (const PatchRecord& r : records)
    out.push_back({{"sample_id", r.sample_id}, {"row", r.row}, {"col", r.col}, {"size", r.size},
                   {"activation", r.activation}, {"rank", r.rank}});
  return out;
}

RgbImage rgb_of(const Tensor& chw, int scale) {
  if (chw.dim(0) <= 3) return upscale(tensor_to_rgb(chw), scale);
  return upscale(tensor_to_rgb(Tensor(Shape{3, chw.dim(1), chw.dim(2)}, chw.data().head(3 * chw.dim(1) * chw.dim(2)))),
                 scale);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attribution, feature visualization and debiasing experiments on encoded absences"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--out", g.out, "Output file or directory");
  app.add_option("--threads", g.threads, "Worker threads (ABSENTIA_THREADS overrides)")->check(CLI::PositiveNumber);
  app.set_version_flag("--version", std::string(kVersion));

  int status = 0;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate and dump a synthetic dataset");
  std::string kind;
  Index size = 0;
  std::vector<std::string> params;
  gen->add_option("--kind", kind, "motion | green_pixel | biased_patch")->required();
  gen->add_option("--size", size, "Number of samples (sequences per kind for motion)")->required();
  gen->add_option("--param", params, "Generator parameter key=value (repeatable)");
  gen->callback([&] {
    const DatasetSpec spec{kind, size, g.seed, parse_assignments(params)};
    const fs::path dir = out_or(g, "data/" + kind);
    const std::vector<Sample> samples = generate(spec);
    dump_dataset(dir, spec, samples);
    std::cout << samples.size() << " samples written to " << dir.string() << "\n";
  });

  // train
  auto* tr = app.add_subcommand("train", "Train the toy or bias model on a dumped dataset");
  std::string model_kind = "bias", data_dir;
  TrainConfig tc;
  std::string prior = "none";
  double lambda = 0.0;
  int prior_steps = 8;
  tr->add_option("--model", model_kind, "toy | bias")->check(CLI::IsMember({"toy", "bias"}));
  tr->add_option("--data", data_dir, "Dataset directory")->required();
  tr->add_option("--epochs", tc.epochs);
  tr->add_option("--lr", tc.lr);
  tr->add_option("--batch-size", tc.batch_size);
  tr->add_option("--weight-decay", tc.weight_decay);
  tr->add_flag("--decoupled", tc.decoupled_weight_decay, "Decoupled weight decay");
  tr->add_option("--prior", prior, "none | presence | presence_absence");
  tr->add_option("--lambda", lambda);
  tr->add_option("--prior-steps", prior_steps);
  tr->callback([&] {
    const std::vector<Sample> samples = load_dataset(data_dir);
    Model init = model_kind == "toy" ? build_toy_model(g.seed) : build_bias_model(g.seed);
    TrainConfig cfg = tc;
    cfg.seed = g.seed;
    const PriorConfig pc{parse_prior_kind(prior), lambda, prior_steps, IntegrationRule::midpoint};
    cfg.extra_loss = prior_loss(init.spec, pc);
    const LabeledData data = to_labeled(samples);
    const Checkpoint ck = train(init, data, cfg);
    const fs::path path = out_or(g, "checkpoint.json");
    ensure_parent(path);
    save_checkpoint(path, ck);
    if (ck.meta.failed) {
      std::cerr << "training failed: " << ck.meta.failure << "\n";
      status = 1;
      return;
    }
    std::cout << "train accuracy " << accuracy(ck.model, data) << ", checkpoint " << path.string() << "\n";
  });

  // attribute
  auto* at = app.add_subcommand("attribute", "Integrated-gradients map for one input");
  std::string checkpoint, input, target = "label";
  Index index = 0;
  int steps = 64, label = -1;
  at->add_option("--checkpoint", checkpoint, "Checkpoint file, or 'reichardt'")->required();
  at->add_option("--input", input, "Dataset directory or PPM image")->required();
  at->add_option("--index", index, "Sample index within a dataset directory");
  at->add_option("--target", target, "Output index, 'label', or 'nontarget'");
  at->add_option("--label", label, "True label (for PPM input)");
  at->add_option("--steps", steps);
  at->callback([&] {
    const Model model = load_model(checkpoint);
    Tensor x;
    if (fs::is_directory(input)) {
      const std::vector<Sample> samples = load_dataset(input);
      if (index < 0 || index >= static_cast<Index>(samples.size())) throw CLI::ValidationError("--index out of range");
      x = samples[static_cast<std::size_t>(index)].image;
      if (label < 0) label = samples[static_cast<std::size_t>(index)].label;
    } else {
      x = rgb_to_tensor(read_ppm(input));
    }
    AttributionConfig ac;
    ac.steps = steps;
    AttributionMap map;
    if (target == "nontarget" || target == "label") {
      if (label < 0) throw CLI::ValidationError("--label is required for '" + target + "' with image input");
      map = target == "label" ? integrated_gradients(model, x, label, ac) : non_target_attribution(model, x, label, ac);
    } else {
      map = integrated_gradients(model, x, std::stoi(target), ac);
    }
    const fs::path path = out_or(g, "map.json");
    ensure_parent(path);
    write_json_file(path, attribution_map_to_json(map));
    render_heatmap(map, with_extension(path, ".ppm"), 8);
    std::cout << "f(x)=" << map.output << " f(0)=" << map.baseline_output << " gap=" << map.completeness_gap << "\n";
  });

  // featviz
  auto* fv = app.add_subcommand("featviz", "Most/least activating patches or synthesized inputs");
  std::string mode = "min", neuron = "0:0", fv_data;
  Index k = 8;
  int patch = 8, stride = 4, synth_steps = 200;
  double synth_lr = 0.05;
  std::vector<Index> shape{3, 32, 32};
  fv->add_option("--checkpoint", checkpoint, "Checkpoint file, or 'reichardt'")->required();
  fv->add_option("--mode", mode, "max | min | top | optimize")->check(CLI::IsMember({"max", "min", "top", "optimize"}));
  fv->add_option("--neuron", neuron, "layer:channel");
  fv->add_option("--data", fv_data, "Dataset directory (max, min, top)");
  fv->add_option("--k", k);
  fv->add_option("--patch", patch);
  fv->add_option("--stride", stride);
  fv->add_option("--steps", synth_steps, "Optimization steps");
  fv->add_option("--lr", synth_lr, "Optimization step size");
  fv->add_option("--shape", shape, "Input shape for optimize (C H W)")->expected(3);
  fv->callback([&] {
    const Model model = load_model(checkpoint);
    const NeuronRef ref = NeuronRef::parse(neuron);
    const fs::path dir = out_or(g, "featviz");
    fs::create_directories(dir);
    json index_json = {{"neuron", ref.str()}, {"mode", mode}};
    if (mode == "optimize") {
      SynthesisConfig sc{synth_steps, synth_lr, g.seed, false};
      const SynthesisResult r = minimize_input(model, ref, Shape(shape.begin(), shape.end()), sc);
      write_ppm(dir / "minimized.ppm", rgb_of(r.input, 8));
      index_json["trace"] = r.trace;
      index_json["input"] = tensor_to_json(r.input);
    } else {
      if (fv_data.empty()) throw CLI::ValidationError("--data is required for mode " + mode);
      const std::vector<Sample> samples = load_dataset(fv_data);
      if (mode == "top") {
        json list = json::array();
        for (const ImageActivation& a : top_images(model, samples, ref, k))
          list.push_back({{"sample_id", a.sample_id}, {"activation", a.activation}});
        index_json["images"] = list;
      } else {
        const std::vector<PatchRecord> records =
            extreme_patches(model, samples, ref, patch, stride, k, parse_patch_mode(mode));
        std::vector<RgbImage> tiles;
        for (const PatchRecord& r : records) {
          tiles.push_back(rgb_of(crop(samples[static_cast<std::size_t>(r.sample_id)].image, r.row, r.col, r.size), 8));
          write_ppm(dir / ("patch_" + std::to_string(r.rank) + ".ppm"), tiles.back());
        }
        write_ppm(dir / "gallery.ppm", tile_images(tiles, 8, 2));
        index_json["patches"] = patches_json(records);
      }
    }
    write_json_file(dir / "index.json", index_json);
    std::cout << "results in " << dir.string() << "\n";
  });

  // intervene
  auto* iv = app.add_subcommand("intervene", "Patch-insertion intervention on every channel of a layer");
  std::string iv_data;
  int layer = 2;
  InterventionConfig ic;
  iv->add_option("--checkpoint", checkpoint, "Checkpoint file, or 'reichardt'")->required();
  iv->add_option("--dataset", iv_data, "Dataset directory")->required();
  iv->add_option("--layer", layer);
  iv->add_option("--patch", ic.patch);
  iv->add_option("--stride", ic.stride);
  iv->add_option("--k", ic.k_images);
  iv->add_option("--candidates", ic.candidates, "Extreme patches cycled over the k images");
  iv->add_option("--alpha", ic.alpha, "Significance level");
  iv->callback([&] {
    const Model model = load_model(checkpoint);
    ic.seed = g.seed;
    const InterventionReport r = run_intervention(model, load_dataset(iv_data), layer, ic);
    const fs::path path = out_or(g, "intervention.json");
    ensure_parent(path);
    write_json_file(path, intervention_report_to_json(r));
    std::cout << "significant inhibition in " << r.significant_fraction << " of " << r.channels.size()
              << " channels\n";
  });

  // debias
  auto* db = app.add_subcommand("debias", "Train with an attribution prior over a lambda grid and seeds");
  DebiasConfig dc;
  dc.grid = {1, 10, 100};
  dc.prior_steps = 1;
  dc.train.lr = 0.01;
  dc.train.batch_size = 32;
  std::size_t n_seeds = 5;
  Index n_train = 1000, n_val = 400;
  db->add_option("--prior", prior, "none | presence | presence_absence");
  db->add_option("--grid", dc.grid, "Lambda values");
  db->add_option("--seeds", n_seeds, "Number of seeds (--seed, --seed+1, ...)");
  db->add_option("--train-size", n_train);
  db->add_option("--val-size", n_val);
  db->add_option("--epochs", dc.train.epochs);
  db->add_option("--lr", dc.train.lr);
  db->add_option("--batch-size", dc.train.batch_size);
  db->add_option("--prior-steps", dc.prior_steps);
  db->add_option("--attr-steps", dc.attr_steps);
  db->add_flag("--unbiased", "Train on data without the spurious patch");
  db->callback([&] {
    dc.prior = parse_prior_kind(prior);
    dc.seeds.clear();
    for (std::size_t s = 0; s < n_seeds; ++s) dc.seeds.push_back(g.seed + s);
    const BiasMode train_mode = db->count("--unbiased") ? BiasMode::none : BiasMode::training;
    const std::vector<NamedSplit> val{{"training", gen_biased_split(n_val, BiasMode::training, g.seed, 1)},
                                      {"inverse", gen_biased_split(n_val, BiasMode::inverse, g.seed, 1)},
                                      {"none", gen_biased_split(n_val, BiasMode::none, g.seed, 1)}};
    const DebiasResult r = train_debiased(gen_biased_split(n_train, train_mode, g.seed, 0), val, dc);
    const fs::path path = out_or(g, "debias.json");
    ensure_parent(path);
    write_json_file(path, debias_result_to_json(r));
    write_text_file(with_extension(path, ".csv"), bias_table_csv({{prior, &r}}));
    std::cout << bias_table_csv({{prior, &r}});
  });

  // run
  auto* run = app.add_subcommand("run", "Run a named experiment pipeline end to end");
  std::string experiment, manifest_path;
  std::vector<std::string> overrides;
  std::size_t run_seeds = 0;
  run->add_option("experiment", experiment, "reichardt | toy | intervention | debias");
  run->add_option("--manifest", manifest_path, "Manifest JSON (overrides the positional experiment)");
  run->add_option("--config", overrides, "Config override key=value (repeatable)");
  run->add_option("--seeds", run_seeds, "Number of training seeds (--seed, --seed+1, ...)");
  run->callback([&] {
    ExperimentManifest m;
    if (!manifest_path.empty()) {
      m = manifest_from_json(read_json_file(manifest_path));
    } else {
      if (experiment.empty()) throw CLI::ValidationError("an experiment name or --manifest is required");
      m = default_manifest(experiment);
      m.config["data_seed"] = g.seed;
    }
    m.config.merge_patch(parse_assignments(overrides));
    if (run_seeds > 0) {
      m.seeds.clear();
      for (std::size_t s = 0; s < run_seeds; ++s) m.seeds.push_back(g.seed + s);
    }
    if (!g.out.empty()) m.out = g.out;
    const ExperimentResult r = run_experiment(m);
    for (const auto& [name, ok] : r.report.at("checks").items())
      std::cout << (ok.get<bool>() ? "PASS " : "FAIL ") << name << "\n";
    std::cout << "report " << (m.out / "report.json").string() << "\n";
    status = r.passed ? 0 : 2;
  });

  // render
  auto* rd = app.add_subcommand("render", "Render an attribution map JSON as a PPM heatmap");
  std::string map_path;
  int scale = 8;
  rd->add_option("--map", map_path, "Attribution map JSON")->required();
  rd->add_option("--scale", scale)->check(CLI::PositiveNumber);
  rd->callback([&] {
    const fs::path path = out_or(g, with_extension(map_path, ".ppm").string());
    ensure_parent(path);
    render_heatmap(attribution_map_from_json(read_json_file(map_path)), path, scale);
    std::cout << path.string() << "\n";
  });

  app.parse_complete_callback([&] {
    int threads = g.threads;
    if (const char* env = std::getenv("ABSENTIA_THREADS"); env && *env) {
      try {
        threads = std::stoi(env);
      } catch (const std::exception&) {
        throw CLI::ValidationError("ABSENTIA_THREADS must be a positive integer");
      }
    }
    if (threads < 1) throw CLI::ValidationError("thread count must be at least 1");
    set_num_threads(threads);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const StageError& e) {
    std::cerr << "error in stage " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return status;
}
