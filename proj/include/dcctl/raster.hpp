#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "dcctl/numerics/errors.hpp"

namespace dcctl {

/// 8-bit planar raster, channels x height x width.
struct Image {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<std::uint8_t> data;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : channels(c), height(h), width(w), data(c * h * w, fill) {}

  std::uint8_t& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  std::uint8_t at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  std::size_t pixels() const { return height * width; }
  friend bool operator==(const Image&, const Image&) = default;
};

/// Writes binary PPM: "P6\n<width> <height>\n255\n" then interleaved RGB bytes.
/// Single-channel images are replicated to gray RGB.
inline void write_ppm(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw DimensionError("PPM needs 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw StateError("cannot open '" + path + "' for writing");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.put(static_cast<char>(img.at(img.channels == 1 ? 0 : c, y, x)));
  if (!out) throw StateError("write failed for '" + path + "'");
}

/// Reads binary PPM (P6) or PGM (P5) with maxval 255.
inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StateError("cannot open image '" + path + "'");
  std::string magic;
  in >> magic;
  auto skip_comments = [&in] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  std::size_t w = 0, h = 0, maxval = 0;
  skip_comments();
  in >> w;
  skip_comments();
  in >> h;
  skip_comments();
  in >> maxval;
  in.get();
  if (!in || (magic != "P6" && magic != "P5") || maxval != 255 || w == 0 || h == 0)
    throw ParseError("'" + path + "' is not an 8-bit binary PPM/PGM");
  const std::size_t c = magic == "P6" ? 3 : 1;
  Image img(c, h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const int v = in.get();
        if (v == EOF) throw ParseError("'" + path + "' is truncated");
        img.at(ch, y, x) = static_cast<std::uint8_t>(v);
      }
  return img;
}

}  // namespace dcctl
