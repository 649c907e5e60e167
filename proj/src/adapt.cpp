#include "vitlab/adapt.hpp"

#include <cmath>

#include "vitlab/interp.hpp"
#include "vitlab/rng.hpp"

namespace vitlab {

Checkpoint resample_patch_embedding_2d(const Checkpoint& ckpt, std::int64_t target_p) {
  if (target_p <= 0) tensor_fail("target patch size must be positive");
  const auto& kernel = ckpt.at("patch_embed.weight");
  if (kernel.shape.size() != 4)
    tensor_fail("patch_embed.weight has rank " + std::to_string(kernel.shape.size()) +
                ", in-plane resampling needs a 2D kernel");
  if (kernel.shape[0] != kernel.shape[1])
    tensor_fail("patch_embed.weight spatial support " + shape_str(kernel.shape) +
                " is not square");
  Checkpoint out = ckpt;
  const std::int64_t src_p = kernel.shape[0];
  out.meta.patch = static_cast<int>(target_p);
  if (target_p == src_p) return out;

  const std::int64_t channels = kernel.shape[2] * kernel.shape[3];
  NamedArray next;
  next.shape = Shape{target_p, target_p, kernel.shape[2], kernel.shape[3]};
  next.data = resample_align_corners(kernel.data, {src_p, src_p}, {target_p, target_p}, channels);
  const double gain = static_cast<double>(src_p * src_p) / static_cast<double>(target_p * target_p);
  for (auto& v : next.data) v = static_cast<float>(v * gain);
  out.put("patch_embed.weight", std::move(next));
  return out;
}

Checkpoint inflate_patch_embedding_3d(const Checkpoint& ckpt, std::int64_t depth_p,
                                      std::int64_t depth_extent, bool normalize) {
  if (depth_p <= 0 || depth_extent % depth_p != 0)
    tensor_fail("depth patch " + std::to_string(depth_p) + " does not divide depth extent " +
                std::to_string(depth_extent));
  const auto& kernel = ckpt.at("patch_embed.weight");
  if (kernel.shape.size() != 4)
    tensor_fail("inflation needs a 2D kernel, got rank " +
                std::to_string(kernel.shape.size()));
  Checkpoint out = ckpt;
  NamedArray next;
  next.shape = Shape{depth_p, kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]};
  next.data.resize(static_cast<std::size_t>(depth_p) * kernel.data.size());
  const float gain = normalize ? 1.0f / static_cast<float>(depth_p) : 1.0f;
  for (std::int64_t z = 0; z < depth_p; ++z)
    for (std::size_t i = 0; i < kernel.data.size(); ++i)
      next.data[static_cast<std::size_t>(z) * kernel.data.size() + i] = kernel.data[i] * gain;
  out.put("patch_embed.weight", std::move(next));
  return out;
}

Checkpoint interpolate_positional_embeddings(const Checkpoint& ckpt,
                                             const std::vector<std::int64_t>& target_grid,
                                             InterpMode mode) {
  if (target_grid.size() != 2 && target_grid.size() != 3)
    tensor_fail("target grid must have 2 or 3 extents");
  for (auto e : target_grid)
    if (e <= 0) tensor_fail("target grid extents must be positive");
  if (target_grid.size() == 2 && mode != InterpMode::Bilinear)
    tensor_fail("2D target grids take bilinear interpolation");
  if (target_grid.size() == 3 && mode != InterpMode::Trilinear)
    tensor_fail("3D target grids take trilinear interpolation");

  Checkpoint out = ckpt;
  out.meta.grid = target_grid;
  if (ckpt.meta.grid == target_grid) return out;  // bit-exact identity

  const auto& pos = ckpt.at("pos_embed");
  const std::int64_t d = pos.shape[1];
  const std::int64_t src_tokens = pos.shape[0] - 1;
  const std::int64_t gs = static_cast<std::int64_t>(std::llround(std::sqrt(
      static_cast<double>(src_tokens))));
  if (ckpt.meta.grid.size() != 2 || gs * gs != src_tokens ||
      ckpt.meta.grid != std::vector<std::int64_t>{gs, gs})
    tensor_fail("source positional embeddings do not form a square grid (" +
                std::to_string(src_tokens) + " patch tokens)");

  std::vector<float> field(pos.data.begin() + d, pos.data.end());  // class row excluded
  std::vector<float> resampled;
  if (target_grid.size() == 2)
    resampled = resample_align_corners(field, {gs, gs}, {target_grid[0], target_grid[1]}, d);
  else
    resampled = resample_align_corners(field, {1, gs, gs},
                                       {target_grid[0], target_grid[1], target_grid[2]}, d);

  NamedArray next;
  std::int64_t cells = 1;
  for (auto e : target_grid) cells *= e;
  next.shape = Shape{cells + 1, d};
  next.data.resize(static_cast<std::size_t>((cells + 1) * d));
  std::copy(pos.data.begin(), pos.data.begin() + d, next.data.begin());
  std::copy(resampled.begin(), resampled.end(), next.data.begin() + d);
  out.put("pos_embed", std::move(next));
  return out;
}

Checkpoint replace_classification_head(const Checkpoint& ckpt, int num_classes,
                                       std::uint64_t seed) {
  if (num_classes < 2) tensor_fail("head needs at least 2 classes");
  Checkpoint out = ckpt;
  const std::int64_t d = ckpt.meta.dim;
  Rng rng(Rng::mix(seed, 0x68656164ull));
  NamedArray weight;
  weight.shape = Shape{d, num_classes};
  weight.data.resize(static_cast<std::size_t>(d * num_classes));
  for (auto& v : weight.data) v = static_cast<float>(rng.truncated_normal(0.02));
  NamedArray bias;
  bias.shape = Shape{num_classes};
  bias.data.assign(static_cast<std::size_t>(num_classes), 0.0f);
  out.put("head.weight", std::move(weight));
  out.put("head.bias", std::move(bias));
  return out;
}

Checkpoint apply_adaptation(const Checkpoint& ckpt, const AdaptationPlan& plan) {
  plan.target.validate();
  if (plan.num_classes < 2) tensor_fail("adaptation plan needs at least 2 classes");
  const auto target_grid = plan.target.grid();
  if ((plan.target.is3d() ? InterpMode::Trilinear : InterpMode::Bilinear) != plan.mode)
    tensor_fail("interpolation mode does not match the target dimensionality");

  Checkpoint out = ckpt;
  const auto& kernel_shape = out.at("patch_embed.weight").shape;
  const bool kernel_matches =
      !plan.fresh_patch_embed && out.meta.patch == plan.target.p &&
      static_cast<int>(kernel_shape.size()) == (plan.target.is3d() ? 5 : 4);

  if (plan.fresh_patch_embed) {
    NamedArray kernel;
    kernel.shape = plan.target.is3d()
                       ? Shape{plan.target.p, plan.target.p, plan.target.p, 3,
                               static_cast<std::int64_t>(out.meta.dim)}
                       : Shape{plan.target.p, plan.target.p, 3,
                               static_cast<std::int64_t>(out.meta.dim)};
    kernel.data.resize(static_cast<std::size_t>(shape_numel(kernel.shape)));
    Rng rng(Rng::mix(plan.head_seed, 0x70656d62ull));
    for (auto& v : kernel.data) v = static_cast<float>(rng.truncated_normal(0.02));
    out.put("patch_embed.weight", std::move(kernel));
    out.meta.patch = static_cast<int>(plan.target.p);
  } else if (!kernel_matches) {
    out = resample_patch_embedding_2d(out, plan.target.p);
    if (plan.target.is3d())
      out = inflate_patch_embedding_3d(out, plan.target.p, plan.target.D,
                                       plan.normalize_inflation);
  }

  out = interpolate_positional_embeddings(out, target_grid,
                                          plan.target.is3d() ? InterpMode::Trilinear
                                                             : InterpMode::Bilinear);

  const bool head_matches =
      plan.reuse_head_when_matching && out.num_classes() == plan.num_classes;
  if (!head_matches) out = replace_classification_head(out, plan.num_classes, plan.head_seed);

  out.meta.patch = static_cast<int>(plan.target.p);
  out.meta.grid = target_grid;
  validate_checkpoint(out);
  return out;
}

}  // namespace vitlab
