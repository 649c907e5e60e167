#pragma once

#include <cstdint>
#include <vector>

#include "vitlab/tensor.hpp"

namespace vitlab {

enum class NpyType { U1, I8, F8 };

// One array in NPY v1.0 serialization (magic 0x93 "NUMPY", C order,
// little-endian). Unsigned bytes, 8-byte signed ints, and doubles only.
struct NpyArray {
  Shape shape;
  NpyType type = NpyType::U1;
  std::vector<unsigned char> u1;
  std::vector<std::int64_t> i8;
  std::vector<double> f8;

  std::int64_t numel() const {
    switch (type) {
      case NpyType::U1: return static_cast<std::int64_t>(u1.size());
      case NpyType::I8: return static_cast<std::int64_t>(i8.size());
      default: return static_cast<std::int64_t>(f8.size());
    }
  }
  std::int64_t as_int(std::int64_t i) const {
    return type == NpyType::U1 ? static_cast<std::int64_t>(u1[static_cast<std::size_t>(i)])
                               : i8[static_cast<std::size_t>(i)];
  }
};

NpyArray parse_npy(const std::vector<unsigned char>& bytes);
std::vector<unsigned char> serialize_npy(const NpyArray& arr);

}  // namespace vitlab
