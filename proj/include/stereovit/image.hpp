#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace stereovit {

// Single-channel float image, row-major, values expected in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> px;

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), px(static_cast<size_t>(h) * w, fill) {}

  float& at(int y, int x) { return px[static_cast<size_t>(y) * width + x]; }
  float at(int y, int x) const { return px[static_cast<size_t>(y) * width + x]; }
  size_t size() const { return px.size(); }

  bool same_shape(const Image& o) const { return height == o.height && width == o.width; }
};

// Binary PGM (P5, maxval 255). Values are quantized with round(v * 255).
void write_pgm(const Image& img, const std::string& path);
Image read_pgm(const std::string& path);

// 3x3 box blur with edge replication.
Image box_blur3(const Image& img);

}  // namespace stereovit
