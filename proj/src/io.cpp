#include "absentia/io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace absentia {

namespace fs = std::filesystem;

json tensor_to_json(const Tensor& t) {
  if (t.rank() == 0) return t[0];
  std::function<json(Index, Index)> build = [&](Index axis, Index offset) {
    json arr = json::array();
    const Index extent = t.dim(axis);
    Index stride = 1;
    for (Index a = axis + 1; a < t.rank(); ++a) stride *= t.dim(a);
    for (Index i = 0; i < extent; ++i) {
      if (axis + 1 == t.rank()) {
        arr.push_back(t[offset + i]);
      } else {
        arr.push_back(build(axis + 1, offset + i * stride));
      }
    }
    return arr;
  };
  return build(0, 0);
}

Tensor tensor_from_json(const json& j) {
  if (j.is_number()) return Tensor::scalar(j.get<double>());
  Shape shape;
  const json* probe = &j;
  while (probe->is_array()) {
    shape.push_back(static_cast<Index>(probe->size()));
    if (probe->empty()) break;
    probe = &(*probe)[0];
  }
  Tensor t(shape);
  Index cursor = 0;
  std::function<void(const json&, std::size_t)> fill = [&](const json& node, std::size_t axis) {
    if (!node.is_array() || static_cast<Index>(node.size()) != shape[axis])
      throw std::invalid_argument("ragged nested array for shape " + shape_str(shape));
    for (const json& item : node) {
      if (axis + 1 == shape.size()) {
        if (!item.is_number()) throw std::invalid_argument("non-numeric tensor element");
        t[cursor++] = item.get<double>();
      } else {
        fill(item, axis + 1);
      }
    }
  };
  fill(j, 0);
  return t;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return json::parse(in);
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json_file(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

void write_ppm(const fs::path& path, const RgbImage& image) {
  std::ostringstream os;
  os << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  write_text_file(path, os.str());
}

RgbImage read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) throw std::runtime_error("unsupported PPM " + path.string());
  in.get();
  RgbImage image(w, h);
  in.read(reinterpret_cast<char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!in) throw std::runtime_error("truncated PPM " + path.string());
  return image;
}

namespace {
std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }
}  // namespace

RgbImage tensor_to_rgb(const Tensor& chw) {
  if (chw.rank() != 3 || chw.dim(0) < 1 || chw.dim(0) > 3)
    throw std::invalid_argument("tensor_to_rgb expects 1-3 x H x W, got " + shape_str(chw.shape()));
  const Index c = chw.dim(0);
  RgbImage image(static_cast<int>(chw.dim(2)), static_cast<int>(chw.dim(1)));
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      std::uint8_t* px = image.at(x, y);
      if (c == 1) {
        px[0] = px[1] = px[2] = to_byte(chw.at3(0, y, x));
      } else {
        for (Index k = 0; k < c; ++k) px[k] = to_byte(chw.at3(k, y, x));
      }
    }
  return image;
}

Tensor rgb_to_tensor(const RgbImage& image) {
  Tensor t(Shape{3, image.height, image.width});
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int k = 0; k < 3; ++k) t.at3(k, y, x) = image.at(x, y)[k] / 255.0;
  return t;
}

RgbImage upscale(const RgbImage& image, int factor) {
  RgbImage out(image.width * factor, image.height * factor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) std::copy_n(image.at(x / factor, y / factor), 3, out.at(x, y));
  return out;
}

}  // namespace absentia
