#pragma once

// Heatmaps, galleries, experiment manifests and the four named pipelines.

#include "absentia/attribution.hpp"
#include "absentia/io.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace absentia {

/// Diverging map scaled by max |value|: positive -> blue, negative -> red,
/// zero -> white. C x H x W maps are summed over channels first.
RgbImage render_heatmap(const Tensor& values);
void render_heatmap(const AttributionMap& map, const std::filesystem::path& path, int scale = 1);

/// Images laid out left to right in rows of `columns`, separated by `gap`
/// white pixels.
RgbImage tile_images(const std::vector<RgbImage>& images, int columns, int gap = 1);

json attribution_map_to_json(const AttributionMap& map);
AttributionMap attribution_map_from_json(const json& j);

inline constexpr const char* kVersion = ABSENTIA_VERSION;

struct ExperimentManifest {
  std::string experiment;  // reichardt | toy | intervention | debias
  json config = json::object();
  std::vector<std::uint64_t> seeds;
  std::filesystem::path out;
  std::string version = kVersion;
};

/// Default configuration of a pipeline (desk scale).
ExperimentManifest default_manifest(const std::string& experiment);
json manifest_to_json(const ExperimentManifest& manifest);
ExperimentManifest manifest_from_json(const json& j);

/// Error raised by a pipeline, tagged with the stage that failed.
class StageError : public std::runtime_error {
 public:
  StageError(const std::string& stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct ExperimentResult {
  json report;  // also written to <out>/report.json
  bool passed = false;  // every check in report["checks"] holds
  std::vector<std::filesystem::path> files;
};

/// Runs the named pipeline, writing report.json, CSV tables and PPM figures
/// under manifest.out. Config keys missing from the manifest take defaults.
ExperimentResult run_experiment(const ExperimentManifest& manifest);

}  // namespace absentia
