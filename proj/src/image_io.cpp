#include "vitlab/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace vitlab {

void write_pgm(const std::string& path, const std::vector<float>& values, std::int64_t h,
               std::int64_t w) {
  if (h <= 0 || w <= 0 || values.size() != static_cast<std::size_t>(h * w))
    throw std::runtime_error("pgm: value count does not match " + std::to_string(h) + "x" +
                             std::to_string(w));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("pgm: cannot open " + path + " for writing");
  out << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(w));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const float v = std::clamp(values[static_cast<std::size_t>(y * w + x)], 0.0f, 1.0f);
      row[static_cast<std::size_t>(x)] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("pgm: write to " + path + " failed");
}

std::vector<float> to_grayscale(const float* img, std::int64_t h, std::int64_t w, std::int64_t c) {
  std::vector<float> gray(static_cast<std::size_t>(h * w));
  for (std::int64_t i = 0; i < h * w; ++i) {
    float sum = 0.0f;
    for (std::int64_t j = 0; j < c; ++j) sum += img[i * c + j];
    gray[static_cast<std::size_t>(i)] = sum / static_cast<float>(c);
  }
  return gray;
}

std::vector<float> grid_overlay(const std::vector<float>& gray, std::int64_t h, std::int64_t w,
                                std::int64_t p) {
  if (p <= 0 || h % p != 0 || w % p != 0)
    throw std::runtime_error("grid overlay: patch size " + std::to_string(p) +
                             " does not divide " + std::to_string(h) + "x" + std::to_string(w));
  std::vector<float> out = gray;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      if (y % p == 0 || x % p == 0 || y == h - 1 || x == w - 1)
        out[static_cast<std::size_t>(y * w + x)] = 1.0f;
  return out;
}

}  // namespace vitlab
