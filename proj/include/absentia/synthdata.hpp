#pragma once

// Seeded generators for the synthetic datasets: moving-column stimuli,
// green-pixel images, and lesion-like images with a spurious colour patch.

#include "absentia/io.hpp"
#include "absentia/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace absentia {

/// Binary mask (same shape as the image) marking where a concept is present.
struct ConceptAnnotation {
  std::string concept_id;
  Tensor mask;
};

struct Sample {
  Index id = 0;
  Tensor image;  // C x H x W, values in [0, 1]
  int label = 0;
  std::optional<Tensor> bias_mask;  // H x W in {0, 1}
  std::vector<ConceptAnnotation> concepts;

  const ConceptAnnotation* concept_of(const std::string& id) const;
};

LabeledData to_labeled(const std::vector<Sample>& samples);

// ---- motion ---------------------------------------------------------------------

enum class MotionKind { left_to_right, bidirectional };

/// Label used for motion samples: 0 = left-to-right, 1 = bi-directional.
int motion_label(MotionKind kind);

struct MotionConfig {
  MotionKind kind = MotionKind::left_to_right;
  int frames = 5;
  int width = 16;
  int height = 4;
  std::uint64_t seed = 0;
  /// Start column of the rightward column; random when unset. For
  /// bi-directional stimuli the leftward column starts at its mirror image.
  std::optional<int> start;
};

struct MotionColumn {
  int direction = 1;           // +1 rightward, -1 leftward
  std::vector<int> positions;  // column per frame, wrapped to [0, width)
};

struct MotionSequence {
  MotionKind kind = MotionKind::left_to_right;
  int width = 0;
  int height = 0;
  std::vector<Tensor> frames;  // H x W each
  std::vector<MotionColumn> columns;
};

MotionSequence gen_motion(const MotionConfig& config);

/// Consecutive frames stacked as 2 x H x W inputs. Pairs in which a column
/// wraps around the border are skipped (a valid convolution cannot see the
/// motion). Each sample carries "l2r" and "r2l" concept masks.
std::vector<Sample> motion_pairs(const MotionSequence& sequence, Index first_id = 0);

// ---- green pixel ------------------------------------------------------------------

inline constexpr int kGreenPixelSize = 32;
inline constexpr Index kGreenPixelTrainSize = 20000;
inline constexpr Index kGreenPixelTestSize = 1000;

/// Label 0 = "class 1" (one green pixel present), 1 = "class 2" (absent).
/// Samples with a green pixel carry a "green" concept mask.
std::vector<Sample> gen_green_pixel(Index n, std::uint64_t seed);

// ---- biased patch -------------------------------------------------------------------

enum class BiasMode { training, inverse, none };

BiasMode parse_bias_mode(const std::string& text);
std::string to_string(BiasMode mode);

inline constexpr int kBiasImageSize = 32;
inline constexpr int kBiasPatchSize = 6;
inline constexpr int kBiasMaskDilation = 2;

struct BiasedSplits {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

/// Label 0 = benign (round brown blob), 1 = malignant (irregular, mottled blue-grey blob).
/// `mode` decides which class carries the patch. The underlying lesion of
/// sample i does not depend on `mode`, so splits generated with the same seed
/// differ only in their patches.
BiasedSplits gen_biased_patch(Index n_train, Index n_val, BiasMode mode, std::uint64_t seed);
std::vector<Sample> gen_biased_split(Index n, BiasMode mode, std::uint64_t seed, std::uint64_t stream);

/// Pastes the multicolour patch into `image` at (row, col); returns the
/// dilated mask of the pasted region.
Tensor paste_bias_patch(Tensor& image, int row, int col, std::uint64_t colour_seed);

// ---- dataset specs and dumps -----------------------------------------------------------------

struct DatasetSpec {
  std::string kind;  // motion | green_pixel | biased_patch
  Index size = 0;
  std::uint64_t seed = 0;
  json params = json::object();
};

json dataset_spec_to_json(const DatasetSpec& spec);
DatasetSpec dataset_spec_from_json(const json& j);
std::vector<Sample> generate(const DatasetSpec& spec);

/// Writes PPM images (and mask images) plus manifest.json.
void dump_dataset(const std::filesystem::path& dir, const DatasetSpec& spec, const std::vector<Sample>& samples);
/// Regenerates from the manifest's spec when present; otherwise reads the PPMs.
std::vector<Sample> load_dataset(const std::filesystem::path& dir);

}  // namespace absentia
