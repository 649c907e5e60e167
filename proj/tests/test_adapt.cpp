#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vitlab/adapt.hpp"
#include "vitlab/checkpoint.hpp"
#include "vitlab/interp.hpp"
#include "vitlab/vit.hpp"

using namespace vitlab;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

bool same_bytes(const NamedArray& a, const NamedArray& b) {
  return a.shape == b.shape && a.data.size() == b.data.size() &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

bool same_checkpoint(const Checkpoint& a, const Checkpoint& b, bool compare_meta = true) {
  if (compare_meta &&
      (a.meta.layers != b.meta.layers || a.meta.dim != b.meta.dim ||
       a.meta.heads != b.meta.heads || a.meta.mlp_ratio != b.meta.mlp_ratio ||
       a.meta.patch != b.meta.patch || a.meta.grid != b.meta.grid))
    return false;
  if (a.tensors.size() != b.tensors.size()) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    if (a.tensors[i].first != b.tensors[i].first) return false;
    if (!same_bytes(a.tensors[i].second, b.tensors[i].second)) return false;
  }
  return true;
}

Checkpoint micro_checkpoint(std::int64_t p, std::int64_t hw, int k, std::uint64_t seed) {
  auto model = ViT<float>::init(vit_micro(PatchSpec{p, hw, hw, 0, 3}, k), seed);
  return model.to_checkpoint();
}

// Zero-filled checkpoint straight from the schema, for shape-only tests.
Checkpoint schema_checkpoint(const CkptMeta& meta, int k) {
  Checkpoint ckpt;
  ckpt.meta = meta;
  for (const auto& [name, shape] : checkpoint_schema(meta, k)) {
    NamedArray arr;
    arr.shape = shape;
    arr.data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0f);
    ckpt.put(name, std::move(arr));
  }
  return ckpt;
}

std::string thrown_message(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("checkpoint save/load round-trips bit-exactly") {
  Checkpoint ckpt = micro_checkpoint(4, 28, 3, 7);
  const std::string path = temp_path("vitlab_roundtrip.bin");
  save_checkpoint(ckpt, path);
  Checkpoint back = load_checkpoint(path);
  CHECK(same_checkpoint(ckpt, back));
  std::remove(path.c_str());
}

TEST_CASE("missing tensor is named in the error") {
  Checkpoint ckpt = micro_checkpoint(4, 28, 3, 7);
  std::erase_if(ckpt.tensors, [](const auto& kv) { return kv.first == "patch_embed.weight"; });
  const std::string msg = thrown_message([&] { validate_checkpoint(ckpt); });
  CHECK(msg.find("missing") != std::string::npos);
  CHECK(msg.find("patch_embed.weight") != std::string::npos);
}

TEST_CASE("shape mismatch reports expected and actual") {
  Checkpoint ckpt = micro_checkpoint(4, 28, 3, 7);
  auto& head = ckpt.at("head.weight");
  head.shape = Shape{300, 3};
  head.data.assign(900, 0.0f);
  const std::string msg = thrown_message([&] { validate_checkpoint(ckpt); });
  CHECK(msg.find("head.weight") != std::string::npos);
  CHECK(msg.find("300") != std::string::npos);
  CHECK(msg.find("64") != std::string::npos);
}

TEST_CASE("corrupt or truncated files are format errors") {
  const std::string path = temp_path("vitlab_corrupt.bin");
  {
    std::ofstream f(path, std::ios::binary);
    std::uint64_t len = 10;
    f.write(reinterpret_cast<const char*>(&len), 8);
    f.write("NOT A JSON", 10);
  }
  CHECK_THROWS_AS((void)load_checkpoint(path), std::runtime_error);
  {
    std::ofstream f(path, std::ios::binary);
    f.write("\x04\x00", 2);
  }
  CHECK_THROWS_AS((void)load_checkpoint(path), std::runtime_error);
  CHECK_THROWS_AS((void)load_checkpoint(temp_path("vitlab_does_not_exist.bin")),
                  std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("kernel resample: identity target is bit-exact") {
  Checkpoint ckpt = micro_checkpoint(4, 28, 3, 11);
  Checkpoint out = resample_patch_embedding_2d(ckpt, 4);
  CHECK(same_checkpoint(ckpt, out));
}

TEST_CASE("kernel resample: constant kernel rescales by (p_src/p_tgt)^2") {
  Checkpoint ckpt = micro_checkpoint(16, 16, 2, 3);
  for (auto& v : ckpt.at("patch_embed.weight").data) v = 0.5f;

  Checkpoint down = resample_patch_embedding_2d(ckpt, 4);
  const auto& k4 = down.at("patch_embed.weight");
  CHECK(k4.shape == Shape{4, 4, 3, 64});
  for (float v : k4.data) CHECK(v == doctest::Approx(8.0).epsilon(1e-6));

  Checkpoint up = resample_patch_embedding_2d(ckpt, 28);
  for (float v : up.at("patch_embed.weight").data)
    CHECK(v == doctest::Approx(0.5 * 16.0 * 16.0 / (28.0 * 28.0)).epsilon(1e-6));

  // response of one output channel to an all-ones patch, before and after
  double src_sum = 0.0, dst_sum = 0.0;
  const auto& k16 = ckpt.at("patch_embed.weight");
  for (std::size_t i = 0; i < k16.data.size(); i += 64) src_sum += k16.data[i];
  for (std::size_t i = 0; i < k4.data.size(); i += 64) dst_sum += k4.data[i];
  CHECK(dst_sum == doctest::Approx(src_sum).epsilon(1e-6));
}

TEST_CASE("kernel resample: affine kernels keep their constant-patch response") {
  Checkpoint ckpt = micro_checkpoint(16, 16, 2, 3);
  auto& kernel = ckpt.at("patch_embed.weight");
  for (std::int64_t y = 0; y < 16; ++y)
    for (std::int64_t x = 0; x < 16; ++x)
      for (std::int64_t c = 0; c < 3 * 64; ++c)
        kernel.data[static_cast<std::size_t>((y * 16 + x) * 3 * 64 + c)] =
            static_cast<float>(0.05 + 0.013 * y - 0.007 * x);

  // target 1 is excluded: a one-tap align-corners grid samples the corner,
  // which for a non-constant kernel is not the mean tap
  for (std::int64_t target : {2, 4, 7, 14, 28}) {
    Checkpoint out = resample_patch_embedding_2d(ckpt, target);
    double src_sum = 0.0, dst_sum = 0.0;
    for (std::size_t i = 0; i < kernel.data.size(); i += 192) src_sum += kernel.data[i];
    const auto& k = out.at("patch_embed.weight");
    for (std::size_t i = 0; i < k.data.size(); i += 192) dst_sum += k.data[i];
    CHECK(dst_sum == doctest::Approx(src_sum).epsilon(1e-4));
  }
}

TEST_CASE("kernel resample rejects bad targets and non-2D kernels") {
  Checkpoint ckpt = micro_checkpoint(4, 28, 3, 11);
  CHECK_THROWS_AS((void)resample_patch_embedding_2d(ckpt, 0), std::invalid_argument);
  CHECK_THROWS_AS((void)resample_patch_embedding_2d(ckpt, -2), std::invalid_argument);
  Checkpoint inflated = inflate_patch_embedding_3d(ckpt, 4, 28);
  CHECK_THROWS_AS((void)resample_patch_embedding_2d(inflated, 2), std::invalid_argument);
}

TEST_CASE("inflation repeats and normalizes the 2D kernel") {
  Checkpoint ckpt = micro_checkpoint(2, 28, 3, 5);
  auto& kernel = ckpt.at("patch_embed.weight");
  for (auto& v : kernel.data) v = 0.5f;

  Checkpoint out = inflate_patch_embedding_3d(ckpt, 2, 28);
  const auto& k3 = out.at("patch_embed.weight");
  CHECK(k3.shape == Shape{2, 2, 2, 3, 64});
  for (float v : k3.data) CHECK(v == 0.25f);

  Checkpoint raw = inflate_patch_embedding_3d(ckpt, 2, 28, false);
  for (float v : raw.at("patch_embed.weight").data) CHECK(v == 0.5f);

  CHECK_THROWS_AS((void)inflate_patch_embedding_3d(ckpt, 3, 28), std::invalid_argument);
  const std::string msg =
      thrown_message([&] { (void)inflate_patch_embedding_3d(ckpt, 3, 28); });
  CHECK(msg.find("3") != std::string::npos);
  CHECK(msg.find("28") != std::string::npos);
}

TEST_CASE("depth-replicated volumes embed like their slice") {
  const std::int64_t p = 2, hw = 4, d = 64;
  Checkpoint ckpt = micro_checkpoint(p, hw, 2, 9);
  Checkpoint inflated = inflate_patch_embedding_3d(ckpt, p, hw);

  Rng rng(42);
  std::vector<float> img(static_cast<std::size_t>(hw * hw * 3));
  for (auto& v : img) v = static_cast<float>(rng.uniform());
  std::vector<float> vol(static_cast<std::size_t>(hw) * img.size());
  for (std::int64_t z = 0; z < hw; ++z)
    std::copy(img.begin(), img.end(), vol.begin() + static_cast<std::int64_t>(img.size()) * z);

  PatchSpec spec2{p, hw, hw, 0, 3};
  PatchSpec spec3{p, hw, hw, hw, 3};
  std::vector<float> patches2(static_cast<std::size_t>(spec2.patch_tokens() * spec2.patch_dim()));
  std::vector<float> patches3(static_cast<std::size_t>(spec3.patch_tokens() * spec3.patch_dim()));
  patchify_2d(img.data(), spec2, patches2.data());
  patchify_3d(vol.data(), spec3, patches3.data());

  const auto& k2 = ckpt.at("patch_embed.weight");
  const auto& k3 = inflated.at("patch_embed.weight");
  const auto& bias = ckpt.at("patch_embed.bias");
  auto project = [&](const std::vector<float>& patch_row, const NamedArray& kernel,
                     std::int64_t j) {
    double acc = bias.data[static_cast<std::size_t>(j)];
    const std::int64_t taps = static_cast<std::int64_t>(patch_row.size());
    for (std::int64_t i = 0; i < taps; ++i)
      acc += static_cast<double>(patch_row[static_cast<std::size_t>(i)]) *
             static_cast<double>(kernel.data[static_cast<std::size_t>(i * d + j)]);
    return acc;
  };

  const std::int64_t plane_tokens = spec2.patch_tokens();
  for (std::int64_t gz = 0; gz < spec3.grid_d(); ++gz)
    for (std::int64_t t = 0; t < plane_tokens; ++t)
      for (std::int64_t j : {0, 17, 63}) {
        std::vector<float> row2(patches2.begin() + t * spec2.patch_dim(),
                                patches2.begin() + (t + 1) * spec2.patch_dim());
        const std::int64_t t3 = gz * plane_tokens + t;
        std::vector<float> row3(patches3.begin() + t3 * spec3.patch_dim(),
                                patches3.begin() + (t3 + 1) * spec3.patch_dim());
        CHECK(project(row3, k3, j) == doctest::Approx(project(row2, k2, j)).epsilon(1e-6));
      }
}

TEST_CASE("1D align-corners section: [0,1] to three knots") {
  std::vector<float> src{0.0f, 1.0f};
  auto out = resample_align_corners(src, {2}, {3}, 1);
  REQUIRE(out.size() == 3);
  CHECK(out[0] == doctest::Approx(0.0));
  CHECK(out[1] == doctest::Approx(0.5));
  CHECK(out[2] == doctest::Approx(1.0));
}

TEST_CASE("positional interpolation: identical grid is bit-exact") {
  Checkpoint ckpt = micro_checkpoint(4, 28, 3, 13);
  Checkpoint out = interpolate_positional_embeddings(ckpt, {7, 7}, InterpMode::Bilinear);
  CHECK(same_checkpoint(ckpt, out));
}

TEST_CASE("positional interpolation: constant field stays constant, class row verbatim") {
  Checkpoint ckpt = micro_checkpoint(4, 28, 3, 13);
  auto& pos = ckpt.at("pos_embed");
  const std::int64_t d = pos.shape[1];
  for (std::int64_t i = 0; i < d; ++i) pos.data[static_cast<std::size_t>(i)] = -2.0f;
  for (std::size_t i = static_cast<std::size_t>(d); i < pos.data.size(); ++i)
    pos.data[i] = 0.75f;

  Checkpoint flat = interpolate_positional_embeddings(ckpt, {5, 5}, InterpMode::Bilinear);
  const auto& p2 = flat.at("pos_embed");
  CHECK(p2.shape == Shape{26, d});
  for (std::int64_t i = 0; i < d; ++i) CHECK(p2.data[static_cast<std::size_t>(i)] == -2.0f);
  for (std::size_t i = static_cast<std::size_t>(d); i < p2.data.size(); ++i)
    CHECK(p2.data[i] == doctest::Approx(0.75).epsilon(1e-6));

  Checkpoint vol = interpolate_positional_embeddings(ckpt, {3, 4, 4}, InterpMode::Trilinear);
  const auto& p3 = vol.at("pos_embed");
  CHECK(p3.shape == Shape{3 * 4 * 4 + 1, d});
  for (std::size_t i = static_cast<std::size_t>(d); i < p3.data.size(); ++i)
    CHECK(p3.data[i] == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("positional interpolation reproduces affine fields at any grid") {
  Checkpoint ckpt = micro_checkpoint(7, 28, 3, 13);  // 4x4 source grid
  auto& pos = ckpt.at("pos_embed");
  const std::int64_t d = pos.shape[1];
  auto affine = [](double y, double x, std::int64_t j) {
    return 0.3 + 1.7 * y - 0.6 * x + 0.01 * static_cast<double>(j);
  };
  for (std::int64_t y = 0; y < 4; ++y)
    for (std::int64_t x = 0; x < 4; ++x)
      for (std::int64_t j = 0; j < d; ++j)
        pos.data[static_cast<std::size_t>((1 + y * 4 + x) * d + j)] =
            static_cast<float>(affine(static_cast<double>(y), static_cast<double>(x), j));

  SUBCASE("2D target") {
    Checkpoint out = interpolate_positional_embeddings(ckpt, {7, 7}, InterpMode::Bilinear);
    const auto& p2 = out.at("pos_embed");
    for (std::int64_t y = 0; y < 7; ++y)
      for (std::int64_t x = 0; x < 7; ++x)
        for (std::int64_t j : {0, 31, 63}) {
          const double sy = static_cast<double>(y) * 3.0 / 6.0;
          const double sx = static_cast<double>(x) * 3.0 / 6.0;
          CHECK(p2.data[static_cast<std::size_t>((1 + y * 7 + x) * d + j)] ==
                doctest::Approx(affine(sy, sx, j)).epsilon(1e-6));
        }
  }
  SUBCASE("3D target is depth-constant") {
    Checkpoint out = interpolate_positional_embeddings(ckpt, {2, 5, 5}, InterpMode::Trilinear);
    const auto& p3 = out.at("pos_embed");
    for (std::int64_t z = 0; z < 2; ++z)
      for (std::int64_t y = 0; y < 5; ++y)
        for (std::int64_t x = 0; x < 5; ++x)
          for (std::int64_t j : {0, 63}) {
            const double sy = static_cast<double>(y) * 3.0 / 4.0;
            const double sx = static_cast<double>(x) * 3.0 / 4.0;
            CHECK(p3.data[static_cast<std::size_t>((1 + (z * 5 + y) * 5 + x) * d + j)] ==
                  doctest::Approx(affine(sy, sx, j)).epsilon(1e-6));
          }
  }
}

TEST_CASE("positional interpolation errors") {
  Checkpoint ckpt = micro_checkpoint(4, 28, 3, 13);
  CHECK_THROWS_AS(
      (void)interpolate_positional_embeddings(ckpt, {5, 5}, InterpMode::Trilinear),
      std::invalid_argument);
  CHECK_THROWS_AS(
      (void)interpolate_positional_embeddings(ckpt, {2, 5, 5}, InterpMode::Bilinear),
      std::invalid_argument);
  CHECK_THROWS_AS((void)interpolate_positional_embeddings(ckpt, {0, 5}, InterpMode::Bilinear),
                  std::invalid_argument);

  // 3D source grids cannot be re-interpolated: non-square by construction
  Checkpoint vol = interpolate_positional_embeddings(ckpt, {2, 7, 7}, InterpMode::Trilinear);
  const std::string msg = thrown_message(
      [&] { (void)interpolate_positional_embeddings(vol, {3, 3}, InterpMode::Bilinear); });
  CHECK(msg.find("square") != std::string::npos);
}

TEST_CASE("head replacement touches only the head") {
  CkptMeta meta{12, 384, 6, 4, 16, {14, 14}};
  Checkpoint ckpt = schema_checkpoint(meta, 1000);
  Checkpoint out = replace_classification_head(ckpt, 8, 0);
  CHECK(out.at("head.weight").shape == Shape{384, 8});
  CHECK(out.num_classes() == 8);
  for (float v : out.at("head.bias").data) CHECK(v == 0.0f);
  bool head_nonzero = false;
  for (float v : out.at("head.weight").data) head_nonzero |= (v != 0.0f);
  CHECK(head_nonzero);
  for (const auto& [name, arr] : out.tensors)
    if (name != "head.weight" && name != "head.bias") CHECK(same_bytes(arr, ckpt.at(name)));

  Checkpoint two = replace_classification_head(ckpt, 2, 0);
  CHECK(two.at("head.weight").shape == Shape{384, 2});

  CHECK(same_bytes(replace_classification_head(ckpt, 8, 5).at("head.weight"),
                   replace_classification_head(ckpt, 8, 5).at("head.weight")));
  CHECK_FALSE(same_bytes(replace_classification_head(ckpt, 8, 5).at("head.weight"),
                         replace_classification_head(ckpt, 8, 6).at("head.weight")));
  CHECK_THROWS_AS((void)replace_classification_head(ckpt, 1, 0), std::invalid_argument);
}

TEST_CASE("apply_adaptation: identity plan is bit-exact") {
  Checkpoint ckpt = micro_checkpoint(4, 28, 5, 21);
  AdaptationPlan plan;
  plan.target = PatchSpec{4, 28, 28, 0, 3};
  plan.num_classes = 5;
  Checkpoint out = apply_adaptation(ckpt, plan);
  CHECK(same_checkpoint(ckpt, out));
}

TEST_CASE("apply_adaptation is idempotent") {
  Checkpoint ckpt = micro_checkpoint(4, 28, 5, 21);

  SUBCASE("2D retarget") {
    AdaptationPlan plan;
    plan.target = PatchSpec{2, 28, 28, 0, 3};
    plan.num_classes = 3;
    Checkpoint once = apply_adaptation(ckpt, plan);
    Checkpoint twice = apply_adaptation(once, plan);
    CHECK(once.meta.patch == 2);
    CHECK(once.meta.grid == std::vector<std::int64_t>{14, 14});
    CHECK(once.num_classes() == 3);
    CHECK(same_checkpoint(once, twice));
  }
  SUBCASE("3D inflation") {
    AdaptationPlan plan;
    plan.target = PatchSpec{7, 28, 28, 28, 3};
    plan.num_classes = 2;
    plan.mode = InterpMode::Trilinear;
    Checkpoint once = apply_adaptation(ckpt, plan);
    Checkpoint twice = apply_adaptation(once, plan);
    CHECK(once.at("patch_embed.weight").shape == Shape{7, 7, 7, 3, 64});
    CHECK(once.meta.grid == std::vector<std::int64_t>{4, 4, 4});
    CHECK(same_checkpoint(once, twice));
  }
}

TEST_CASE("apply_adaptation rejects a mode that fights the target") {
  Checkpoint ckpt = micro_checkpoint(4, 28, 5, 21);
  AdaptationPlan plan;
  plan.target = PatchSpec{7, 28, 28, 28, 3};
  plan.num_classes = 2;
  plan.mode = InterpMode::Bilinear;
  CHECK_THROWS_AS((void)apply_adaptation(ckpt, plan), std::invalid_argument);
}

TEST_CASE("adapted checkpoints load and run") {
  Checkpoint ckpt = micro_checkpoint(2, 4, 2, 33);
  AdaptationPlan plan;
  plan.target = PatchSpec{2, 4, 4, 4, 3};
  plan.num_classes = 4;
  plan.mode = InterpMode::Trilinear;
  Checkpoint adapted = apply_adaptation(ckpt, plan);

  auto model = ViT<float>::from_checkpoint(adapted, plan.target);
  std::vector<float> vol(static_cast<std::size_t>(plan.target.voxels()));
  Rng rng(4);
  for (auto& v : vol) v = static_cast<float>(rng.uniform());
  Tensor<float> logits = model.forward_images(vol.data(), 1);
  REQUIRE(logits.shape() == Shape{1, 4});
  for (float v : logits.data()) CHECK(std::isfinite(v));
}

TEST_CASE("fresh patch embedding skips resampling") {
  Checkpoint ckpt = micro_checkpoint(4, 28, 5, 21);
  AdaptationPlan plan;
  plan.target = PatchSpec{2, 28, 28, 0, 3};
  plan.num_classes = 5;
  plan.fresh_patch_embed = true;
  Checkpoint out = apply_adaptation(ckpt, plan);
  CHECK(out.at("patch_embed.weight").shape == Shape{2, 2, 3, 64});
  Checkpoint resampled = apply_adaptation(ckpt, [&] {
    AdaptationPlan q = plan;
    q.fresh_patch_embed = false;
    return q;
  }());
  CHECK_FALSE(same_bytes(out.at("patch_embed.weight"), resampled.at("patch_embed.weight")));
  CHECK(same_bytes(out.at("pos_embed"), resampled.at("pos_embed")));
}
