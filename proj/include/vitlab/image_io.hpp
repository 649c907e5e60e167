#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vitlab {

// Binary PGM (P5), 8-bit. Values are clamped to [0, 1] and rounded to 0-255.
void write_pgm(const std::string& path, const std::vector<float>& values, std::int64_t h,
               std::int64_t w);

// Channel-mean of an H x W x C channel-last image.
std::vector<float> to_grayscale(const float* img, std::int64_t h, std::int64_t w, std::int64_t c);

// Grayscale copy with white lines on the patch-grid boundaries.
std::vector<float> grid_overlay(const std::vector<float>& gray, std::int64_t h, std::int64_t w,
                                std::int64_t p);

}  // namespace vitlab
