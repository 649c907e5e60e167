#pragma once

#include <cstdint>

#include "vitlab/checkpoint.hpp"
#include "vitlab/vit.hpp"

namespace vitlab {

enum class InterpMode { Bilinear, Trilinear };

// How to turn a pretrained checkpoint into weights for a new patch size,
// input dimensionality, and class count.
struct AdaptationPlan {
  PatchSpec target;
  int num_classes = 0;
  InterpMode mode = InterpMode::Bilinear;
  bool normalize_inflation = true;
  bool fresh_patch_embed = false;     // reinitialize the kernel instead of resampling
  bool reuse_head_when_matching = true;
  std::uint64_t head_seed = 0;
};

inline InterpMode default_interp_mode(const PatchSpec& target) {
  return target.is3d() ? InterpMode::Trilinear : InterpMode::Bilinear;
}

// Bilinearly resamples the kernel's square spatial support to target_p and
// rescales by (p_src/p_tgt)^2 so the response to a constant patch is
// preserved. Identity when target_p equals the source patch size.
Checkpoint resample_patch_embedding_2d(const Checkpoint& ckpt, std::int64_t target_p);

// Builds a 3D kernel by repeating the 2D kernel depth_p times along depth,
// dividing by depth_p when normalize is set so depth-replicated volumes embed
// like their slice.
Checkpoint inflate_patch_embedding_3d(const Checkpoint& ckpt, std::int64_t depth_p,
                                      std::int64_t depth_extent, bool normalize = true);

// Resamples the positional-embedding grid (class token carried over
// verbatim). 2D targets take Bilinear, 3D targets Trilinear; the 2D source
// grid is depth-stacked for 3D targets. Bit-exact when the grid is unchanged.
Checkpoint interpolate_positional_embeddings(const Checkpoint& ckpt,
                                             const std::vector<std::int64_t>& target_grid,
                                             InterpMode mode);

// Fresh head (truncated normal std 0.02 weights, zero bias); everything else
// bit-identical.
Checkpoint replace_classification_head(const Checkpoint& ckpt, int num_classes,
                                       std::uint64_t seed);

// Full pipeline: kernel resample (and inflation for 3D targets), positional
// grid interpolation, head replacement or reuse. Identity plans return every
// tensor bit-identical; applying a plan twice equals applying it once.
Checkpoint apply_adaptation(const Checkpoint& ckpt, const AdaptationPlan& plan);

}  // namespace vitlab
