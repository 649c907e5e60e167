#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitlab/vit.hpp"

namespace vitlab {

struct SplitData {
  std::int64_t n = 0;
  std::vector<float> images;  // n * sample_values, row-major, channel-last
  std::vector<int> labels;    // n
};

struct DatasetBundle {
  std::string name;
  std::string modality;
  std::int64_t H = 0, W = 0, D = 0, C = 0;  // D == 0 for 2D
  int K = 0;
  SplitData train, val, test;

  bool is3d() const { return D > 0; }
  std::int64_t sample_values() const { return (is3d() ? D : 1) * H * W * C; }
  PatchSpec patch_spec(std::int64_t p) const { return PatchSpec{p, H, W, D, C}; }
  const float* image(const SplitData& split, std::int64_t i) const {
    return split.images.data() + i * sample_values();
  }
  void validate() const;
};

// Known archives with their published split sizes and class counts.
struct RegistryRow {
  const char* key;
  int train, val, test, k;
  bool is3d;
  const char* modality;
};
const std::vector<RegistryRow>& dataset_registry();

// "BreastMNIST" / "adrenalmnist3d" / "breast" all reduce to the registry key.
std::string normalize_dataset_name(const std::string& name);

// Discrepancies between a bundle and its registry row; empty when the bundle
// matches or the name is unknown.
std::vector<std::string> registry_mismatches(const DatasetBundle& bundle);

// ZIP of NPY members {train,val,test}_{images,labels}; byte images scaled to
// [0,1]. Registry mismatches are warnings on stderr, not errors.
DatasetBundle load_dataset(const std::string& path, const std::string& name);
void save_dataset(const DatasetBundle& bundle, const std::string& path);

// 1-channel to 3-channel replication; 3-channel input returned unchanged.
DatasetBundle to_three_channels(DatasetBundle bundle);

// Index batches under a seeded per-epoch shuffle; the last batch may be short.
std::vector<std::vector<std::int64_t>> batches(std::int64_t n, std::int64_t batch_size,
                                               std::uint64_t seed, std::int64_t epoch);

// Two-class 28x28x3 set: smooth gradient backgrounds, class 1 carrying a
// 2x2-period checkerboard (amplitude 0.25) in one random 8x8 region.
// Stratified 70/10/20 split.
DatasetBundle generate_synthetic_texture(std::int64_t n_per_class, std::uint64_t seed);

}  // namespace vitlab
