#include "absentia/report.hpp"

#include <algorithm>
#include <cmath>

namespace absentia {

namespace fs = std::filesystem;

RgbImage render_heatmap(const Tensor& values) {
  Tensor map;
  if (values.rank() == 2) {
    map = values;
  } else if (values.rank() == 3) {
    map = Tensor(Shape{values.dim(1), values.dim(2)});
    const Index plane = values.dim(1) * values.dim(2);
    for (Index c = 0; c < values.dim(0); ++c) map.data() += values.data().segment(c * plane, plane);
  } else {
    throw std::invalid_argument("render_heatmap expects H x W or C x H x W, got " + shape_str(values.shape()));
  }
  const Index h = map.dim(0), w = map.dim(1);
  const double scale = map.numel() == 0 ? 0.0 : map.data().abs().maxCoeff();
  RgbImage image(static_cast<int>(w), static_cast<int>(h));
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const double v = map[y * w + x];
      const double t = scale > 0.0 ? std::abs(v) / scale : 0.0;
      const auto fade = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - t)));
      std::uint8_t* px = image.at(static_cast<int>(x), static_cast<int>(y));
      px[0] = v < 0.0 ? 255 : fade;
      px[1] = fade;
      px[2] = v > 0.0 ? 255 : fade;
    }
  return image;
}

void render_heatmap(const AttributionMap& map, const fs::path& path, int scale) {
  if (scale < 1) throw std::invalid_argument("render_heatmap: scale must be at least 1");
  write_ppm(path, upscale(render_heatmap(map.values), scale));
}

RgbImage tile_images(const std::vector<RgbImage>& images, int columns, int gap) {
  if (images.empty()) throw std::invalid_argument("tile_images: nothing to tile");
  if (columns < 1 || gap < 0) throw std::invalid_argument("tile_images: bad layout");
  int cell_w = 0, cell_h = 0;
  for (const RgbImage& im : images) {
    cell_w = std::max(cell_w, im.width);
    cell_h = std::max(cell_h, im.height);
  }
  const int n = static_cast<int>(images.size());
  const int cols = std::min(columns, n), rows = (n + cols - 1) / cols;
  RgbImage out(cols * cell_w + (cols - 1) * gap, rows * cell_h + (rows - 1) * gap);
  std::fill(out.pixels.begin(), out.pixels.end(), 255);
  for (int i = 0; i < n; ++i) {
    const int ox = (i % cols) * (cell_w + gap), oy = (i / cols) * (cell_h + gap);
    const RgbImage& im = images[static_cast<std::size_t>(i)];
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x) std::copy_n(im.at(x, y), 3, out.at(ox + x, oy + y));
  }
  return out;
}

json attribution_map_to_json(const AttributionMap& map) {
  return {{"target", map.target},
          {"method", map.method},
          {"steps", map.steps},
          {"rule", to_string(map.rule)},
          {"output", map.output},
          {"baseline_output", map.baseline_output},
          {"completeness_gap", map.completeness_gap},
          {"values", tensor_to_json(map.values)}};
}

AttributionMap attribution_map_from_json(const json& j) {
  AttributionMap map;
  map.values = tensor_from_json(j.at("values"));
  map.target = j.value("target", std::string());
  map.method = j.value("method", std::string("integrated_gradients"));
  map.steps = j.value("steps", 0);
  map.rule = parse_integration_rule(j.value("rule", std::string("midpoint")));
  map.output = j.value("output", 0.0);
  map.baseline_output = j.value("baseline_output", 0.0);
  map.completeness_gap = j.value("completeness_gap", 0.0);
  return map;
}

json manifest_to_json(const ExperimentManifest& manifest) {
  return {{"experiment", manifest.experiment},
          {"config", manifest.config},
          {"seeds", manifest.seeds},
          {"out", manifest.out.generic_string()},
          {"version", manifest.version}};
}

ExperimentManifest manifest_from_json(const json& j) {
  ExperimentManifest m = default_manifest(j.at("experiment").get<std::string>());
  if (j.contains("config"))
    for (const auto& [key, value] : j.at("config").items()) m.config[key] = value;
  if (j.contains("seeds")) m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("out")) m.out = j.at("out").get<std::string>();
  return m;
}

}  // namespace absentia
