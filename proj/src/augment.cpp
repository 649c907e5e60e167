#include "vitlab/augment.hpp"

#include <algorithm>
#include <cmath>

#include "vitlab/tensor.hpp"

namespace vitlab {

namespace {

constexpr double kPi = 3.14159265358979323846;

float sample_bilinear(const float* img, std::int64_t H, std::int64_t W, std::int64_t C,
                      double y, double x, std::int64_t c) {
  y = std::clamp(y, 0.0, static_cast<double>(H - 1));
  x = std::clamp(x, 0.0, static_cast<double>(W - 1));
  const std::int64_t y0 = static_cast<std::int64_t>(y);
  const std::int64_t x0 = static_cast<std::int64_t>(x);
  const std::int64_t y1 = std::min(y0 + 1, H - 1);
  const std::int64_t x1 = std::min(x0 + 1, W - 1);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  auto at = [&](std::int64_t yy, std::int64_t xx) {
    return static_cast<double>(img[(yy * W + xx) * C + c]);
  };
  return static_cast<float>((1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                            fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1)));
}

}  // namespace

void AugmentationPolicy::validate() const {
  if (hflip_p < 0 || hflip_p > 1 || flip3d_p < 0 || flip3d_p > 1 || rot90_p < 0 || rot90_p > 1)
    tensor_fail("augmentation probabilities must lie in [0, 1]");
  if (crop_scale_lo <= 0 || crop_scale_hi > 1 || crop_scale_lo > crop_scale_hi)
    tensor_fail("crop scale range must be within (0, 1] with lo <= hi");
  if (rotate_deg < 0 || jitter_amp < 0) tensor_fail("augmentation magnitudes must be >= 0");
}

std::vector<float> augment_2d(const std::vector<float>& img, std::int64_t H, std::int64_t W,
                              std::int64_t C, const AugmentationPolicy& policy, Rng& rng) {
  policy.validate();
  if (static_cast<std::int64_t>(img.size()) != H * W * C)
    tensor_fail("image length does not match geometry");
  std::vector<float> cur = img;

  if (policy.crop) {
    const double area = policy.crop_scale_lo +
                        rng.uniform() * (policy.crop_scale_hi - policy.crop_scale_lo);
    const double side = std::sqrt(area);
    const std::int64_t ch = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(std::lround(side * static_cast<double>(H))), 1, H);
    const std::int64_t cw = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(std::lround(side * static_cast<double>(W))), 1, W);
    const std::int64_t y0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(H - ch + 1)));
    const std::int64_t x0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(W - cw + 1)));
    std::vector<float> next(cur.size());
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        const double sy = (static_cast<double>(y) + 0.5) * static_cast<double>(ch) /
                              static_cast<double>(H) - 0.5 + static_cast<double>(y0);
        const double sx = (static_cast<double>(x) + 0.5) * static_cast<double>(cw) /
                              static_cast<double>(W) - 0.5 + static_cast<double>(x0);
        for (std::int64_t c = 0; c < C; ++c)
          next[static_cast<std::size_t>((y * W + x) * C + c)] =
              sample_bilinear(cur.data(), H, W, C, sy, sx, c);
      }
    cur = std::move(next);
  }

  if (policy.hflip && rng.uniform() < policy.hflip_p) {
    std::vector<float> next(cur.size());
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x)
        for (std::int64_t c = 0; c < C; ++c)
          next[static_cast<std::size_t>((y * W + x) * C + c)] =
              cur[static_cast<std::size_t>((y * W + (W - 1 - x)) * C + c)];
    cur = std::move(next);
  }

  if (policy.rotate) {
    const double theta =
        (2.0 * rng.uniform() - 1.0) * policy.rotate_deg * kPi / 180.0;
    const double cy = static_cast<double>(H - 1) / 2.0;
    const double cx = static_cast<double>(W - 1) / 2.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    std::vector<float> next(cur.size());
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        const double dy = static_cast<double>(y) - cy;
        const double dx = static_cast<double>(x) - cx;
        const double sy = ct * dy - st * dx + cy;
        const double sx = st * dy + ct * dx + cx;
        for (std::int64_t c = 0; c < C; ++c)
          next[static_cast<std::size_t>((y * W + x) * C + c)] =
              sample_bilinear(cur.data(), H, W, C, sy, sx, c);
      }
    cur = std::move(next);
  }

  if (policy.jitter) {
    const double brightness = (2.0 * rng.uniform() - 1.0) * policy.jitter_amp;
    const double contrast = 1.0 + (2.0 * rng.uniform() - 1.0) * policy.jitter_amp;
    double mean = 0.0;
    for (float v : cur) mean += v;
    mean = mean / static_cast<double>(cur.size()) + brightness;
    for (auto& v : cur)
      v = static_cast<float>((static_cast<double>(v) + brightness - mean) * contrast + mean);
  }

  if (policy.crop || policy.hflip || policy.rotate || policy.jitter)
    for (auto& v : cur) v = std::clamp(v, 0.0f, 1.0f);
  return cur;
}

std::vector<float> flip_axis(const std::vector<float>& vol, std::int64_t D, std::int64_t H,
                             std::int64_t W, std::int64_t C, int axis) {
  std::vector<float> out(vol.size());
  for (std::int64_t z = 0; z < D; ++z)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        const std::int64_t sz = axis == 0 ? D - 1 - z : z;
        const std::int64_t sy = axis == 1 ? H - 1 - y : y;
        const std::int64_t sx = axis == 2 ? W - 1 - x : x;
        for (std::int64_t c = 0; c < C; ++c)
          out[static_cast<std::size_t>(((z * H + y) * W + x) * C + c)] =
              vol[static_cast<std::size_t>(((sz * H + sy) * W + sx) * C + c)];
      }
  return out;
}

std::vector<float> rotate90_axis(const std::vector<float>& vol, std::int64_t D, std::int64_t H,
                                 std::int64_t W, std::int64_t C, int axis) {
  const bool square = (axis == 0 && H == W) || (axis == 1 && D == W) || (axis == 2 && D == H);
  if (!square) tensor_fail("right-angle rotation needs equal extents in the rotated plane");
  std::vector<float> out(vol.size());
  for (std::int64_t z = 0; z < D; ++z)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        std::int64_t sz = z, sy = y, sx = x;
        if (axis == 0) {
          sy = x;
          sx = H - 1 - y;
        } else if (axis == 1) {
          sz = x;
          sx = D - 1 - z;
        } else {
          sz = y;
          sy = D - 1 - z;
        }
        for (std::int64_t c = 0; c < C; ++c)
          out[static_cast<std::size_t>(((z * H + y) * W + x) * C + c)] =
              vol[static_cast<std::size_t>(((sz * H + sy) * W + sx) * C + c)];
      }
  return out;
}

std::vector<float> augment_3d(const std::vector<float>& vol, std::int64_t D, std::int64_t H,
                              std::int64_t W, std::int64_t C, const AugmentationPolicy& policy,
                              Rng& rng) {
  policy.validate();
  if (static_cast<std::int64_t>(vol.size()) != D * H * W * C)
    tensor_fail("volume length does not match geometry");
  std::vector<float> cur = vol;

  if (policy.flip3d)
    for (int axis = 0; axis < 3; ++axis)
      if (rng.uniform() < policy.flip3d_p) cur = flip_axis(cur, D, H, W, C, axis);

  if (policy.rot90)
    for (int axis = 0; axis < 3; ++axis)
      if (rng.uniform() < policy.rot90_p) {
        const int quarter_turns = 1 + static_cast<int>(rng.below(3));
        for (int k = 0; k < quarter_turns; ++k) cur = rotate90_axis(cur, D, H, W, C, axis);
      }

  return cur;
}

std::vector<float> augment_sample(const std::vector<float>& sample, std::int64_t D,
                                  std::int64_t H, std::int64_t W, std::int64_t C,
                                  const AugmentationPolicy& policy, std::uint64_t seed,
                                  std::int64_t index, std::int64_t epoch) {
  Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(index),
                   static_cast<std::uint64_t>(epoch), 0x617567ull));
  return D > 0 ? augment_3d(sample, D, H, W, C, policy, rng)
               : augment_2d(sample, H, W, C, policy, rng);
}

}  // namespace vitlab
