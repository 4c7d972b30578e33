#include "stereovit/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace stereovit {

void write_pgm(const Image& img, const std::string& path) {
  if (img.height <= 0 || img.width <= 0) {
    throw std::invalid_argument("write_pgm: empty image");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(img.width));
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      float v = std::clamp(img.at(y, x), 0.0f, 1.0f);
      row[static_cast<size_t>(x)] = static_cast<uint8_t>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(row.data()), img.width);
  }
  if (!out) throw std::runtime_error("write_pgm: write failed for " + path);
}

namespace {
int read_pgm_token(std::istream& in) {
  // Skips whitespace and '#' comments, then reads one non-negative integer.
  int c = in.get();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    }
    c = in.get();
  }
  if (c == EOF || !std::isdigit(c)) throw std::runtime_error("read_pgm: malformed header");
  int value = 0;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    c = in.get();
  }
  return value;
}
}  // namespace

Image read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_pgm: cannot open " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '5') throw std::runtime_error("read_pgm: not a P5 file: " + path);
  int w = read_pgm_token(in);
  int h = read_pgm_token(in);
  int maxval = read_pgm_token(in);
  if (maxval != 255) throw std::runtime_error("read_pgm: unsupported maxval in " + path);
  Image img(h, w);
  std::vector<uint8_t> buf(static_cast<size_t>(w) * h);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) {
    throw std::runtime_error("read_pgm: truncated pixel data in " + path);
  }
  for (size_t i = 0; i < buf.size(); ++i) img.px[i] = static_cast<float>(buf[i]) / 255.0f;
  return img;
}

Image box_blur3(const Image& img) {
  Image out(img.height, img.width);
  auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      float acc = 0.0f;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          acc += img.at(clampi(y + dy, 0, img.height - 1), clampi(x + dx, 0, img.width - 1));
        }
      }
      out.at(y, x) = acc / 9.0f;
    }
  }
  return out;
}

}  // namespace stereovit
