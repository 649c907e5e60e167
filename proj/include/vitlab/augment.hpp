#pragma once

#include <cstdint>
#include <vector>

#include "vitlab/rng.hpp"

namespace vitlab {

// Training-time augmentation. 2D transforms run crop -> flip -> rotate ->
// jitter; 3D runs per-axis flips then right-angle rotations. Randomness is
// keyed by (seed, sample index, epoch) so any sample can be regenerated
// independently.
struct AugmentationPolicy {
  bool crop = true;
  double crop_scale_lo = 0.8, crop_scale_hi = 1.0;  // area fraction
  bool hflip = true;
  double hflip_p = 0.5;
  bool rotate = true;
  double rotate_deg = 15.0;
  bool jitter = true;
  double jitter_amp = 0.1;  // brightness shift and contrast gain range

  bool flip3d = true;
  double flip3d_p = 0.5;
  bool rot90 = true;
  double rot90_p = 0.5;

  static AugmentationPolicy none() {
    AugmentationPolicy p;
    p.crop = p.hflip = p.rotate = p.jitter = p.flip3d = p.rot90 = false;
    return p;
  }

  void validate() const;
};

std::vector<float> augment_2d(const std::vector<float>& img, std::int64_t H, std::int64_t W,
                              std::int64_t C, const AugmentationPolicy& policy, Rng& rng);
std::vector<float> augment_3d(const std::vector<float>& vol, std::int64_t D, std::int64_t H,
                              std::int64_t W, std::int64_t C, const AugmentationPolicy& policy,
                              Rng& rng);

// Keyed entry point; D == 0 selects the 2D path.
std::vector<float> augment_sample(const std::vector<float>& sample, std::int64_t D,
                                  std::int64_t H, std::int64_t W, std::int64_t C,
                                  const AugmentationPolicy& policy, std::uint64_t seed,
                                  std::int64_t index, std::int64_t epoch);

// Building blocks, exposed for direct checks.
std::vector<float> flip_axis(const std::vector<float>& vol, std::int64_t D, std::int64_t H,
                             std::int64_t W, std::int64_t C, int axis);
std::vector<float> rotate90_axis(const std::vector<float>& vol, std::int64_t D, std::int64_t H,
                                 std::int64_t W, std::int64_t C, int axis);

}  // namespace vitlab
