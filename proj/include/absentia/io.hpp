#pragma once

#include "absentia/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace absentia {

using json = nlohmann::json;

/// Tensor as nested JSON arrays (a rank-0 tensor is a bare number).
json tensor_to_json(const Tensor& t);
/// Inverse of tensor_to_json; the shape is read from the nesting.
Tensor tensor_from_json(const json& j);

json read_json_file(const std::filesystem::path& path);
/// Writes `j` with a fixed layout, creating parent directories.
void write_json_file(const std::filesystem::path& path, const json& j);
void write_text_file(const std::filesystem::path& path, const std::string& text);

/// 8-bit RGB raster.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, RGB interleaved

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {}
  std::uint8_t* at(int x, int y) { return &pixels[(static_cast<std::size_t>(y) * width + x) * 3]; }
  const std::uint8_t* at(int x, int y) const { return &pixels[(static_cast<std::size_t>(y) * width + x) * 3]; }
};

/// Binary PPM (P6, maxval 255).
void write_ppm(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_ppm(const std::filesystem::path& path);

/// C x H x W tensor in [0,1] -> RGB raster. One channel renders as gray,
/// two channels as (c0, c1, 0), three as RGB.
RgbImage tensor_to_rgb(const Tensor& chw);
/// RGB raster -> 3 x H x W tensor in [0,1].
Tensor rgb_to_tensor(const RgbImage& image);
/// Nearest-neighbour upscale, for viewing tiny images.
RgbImage upscale(const RgbImage& image, int factor);

}  // namespace absentia
