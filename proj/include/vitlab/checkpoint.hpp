#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vitlab/tensor.hpp"

namespace vitlab {

struct NamedArray {
  Shape shape;
  std::vector<float> data;
  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
};

// Source-model geometry carried inside the checkpoint header. `grid` is the
// positional-embedding token grid (2 entries in-plane, 3 with depth).
struct CkptMeta {
  int layers = 0;
  int dim = 0;
  int heads = 0;
  int mlp_ratio = 4;
  int patch = 0;
  std::vector<std::int64_t> grid;
};

class Checkpoint {
 public:
  CkptMeta meta;
  std::vector<std::pair<std::string, NamedArray>> tensors;

  bool has(const std::string& name) const;
  NamedArray& at(const std::string& name);
  const NamedArray& at(const std::string& name) const;
  void put(const std::string& name, NamedArray arr);  // insert or replace

  bool is3d() const { return meta.grid.size() == 3; }
  int num_classes() const;           // from head.weight
  std::int64_t grid_tokens() const;  // product of grid + 1 class token
};

// Expected (name, shape) list for a given geometry and class count, in
// canonical serialization order.
std::vector<std::pair<std::string, Shape>> checkpoint_schema(const CkptMeta& meta,
                                                             int num_classes);

// Throws when a required tensor is missing, has the wrong shape, or an
// unknown name is present.
void validate_checkpoint(const Checkpoint& ckpt);

// Binary container: 8-byte little-endian header length, UTF-8 JSON header
// mapping names to {dtype, shape, offset, nbytes}, then raw f32 data.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace vitlab
