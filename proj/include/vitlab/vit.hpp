#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vitlab/checkpoint.hpp"
#include "vitlab/rng.hpp"
#include "vitlab/tensor.hpp"

namespace vitlab {

// Patchification geometry. D == 0 means 2D input.
struct PatchSpec {
  std::int64_t p = 0;
  std::int64_t H = 0;
  std::int64_t W = 0;
  std::int64_t D = 0;
  std::int64_t C = 3;

  bool is3d() const { return D > 0; }
  int dims() const { return is3d() ? 3 : 2; }
  std::int64_t grid_h() const { return H / p; }
  std::int64_t grid_w() const { return W / p; }
  std::int64_t grid_d() const { return is3d() ? D / p : 1; }
  std::vector<std::int64_t> grid() const {
    return is3d() ? std::vector<std::int64_t>{D / p, H / p, W / p}
                  : std::vector<std::int64_t>{H / p, W / p};
  }
  std::int64_t patch_tokens() const { return grid_d() * grid_h() * grid_w(); }
  std::int64_t total_tokens() const { return patch_tokens() + 1; }
  std::int64_t patch_dim() const {
    std::int64_t v = p * p * C;
    return is3d() ? v * p : v;
  }
  std::int64_t voxels() const { return (is3d() ? D : 1) * H * W * C; }

  void validate() const {
    if (p <= 0 || H <= 0 || W <= 0 || C <= 0)
      tensor_fail("patch spec has non-positive extents");
    if (H % p != 0 || W % p != 0 || (is3d() && D % p != 0))
      tensor_fail("patch size " + std::to_string(p) + " does not divide input extents " +
                  std::to_string(H) + "x" + std::to_string(W) +
                  (is3d() ? "x" + std::to_string(D) : ""));
  }
};

struct ViTConfig {
  int layers = 0;
  int dim = 0;
  int heads = 0;
  int mlp_ratio = 4;
  int num_classes = 0;
  PatchSpec patch;
  double drop_rate = 0.0;

  void validate() const {
    patch.validate();
    if (layers <= 0 || dim <= 0 || heads <= 0 || mlp_ratio <= 0)
      tensor_fail("model config has non-positive fields");
    if (dim % heads != 0)
      tensor_fail("embedding dim " + std::to_string(dim) + " not divisible by heads " +
                  std::to_string(heads));
    if (num_classes < 2) tensor_fail("num_classes must be at least 2");
    if (drop_rate < 0.0 || drop_rate >= 1.0) tensor_fail("drop_rate must be in [0, 1)");
  }
};

inline ViTConfig vit_small(PatchSpec patch, int num_classes, double drop_rate = 0.0) {
  return ViTConfig{12, 384, 6, 4, num_classes, patch, drop_rate};
}

inline ViTConfig vit_micro(PatchSpec patch, int num_classes, double drop_rate = 0.0) {
  return ViTConfig{4, 64, 4, 4, num_classes, patch, drop_rate};
}

// ---- patchification ----
// Raster-order non-overlapping patches (depth-major in 3D), each flattened
// with the channel fastest. `img` is H x W x C (or D x H x W x C) row-major.

template <typename S>
void patchify_2d(const S* img, const PatchSpec& spec, S* out) {
  const std::int64_t p = spec.p, W = spec.W, C = spec.C;
  S* dst = out;
  for (std::int64_t gy = 0; gy < spec.grid_h(); ++gy)
    for (std::int64_t gx = 0; gx < spec.grid_w(); ++gx)
      for (std::int64_t dy = 0; dy < p; ++dy) {
        const S* src = img + ((gy * p + dy) * W + gx * p) * C;
        for (std::int64_t i = 0; i < p * C; ++i) *dst++ = src[i];
      }
}

template <typename S>
void unpatchify_2d(const S* patches, const PatchSpec& spec, S* img) {
  const std::int64_t p = spec.p, W = spec.W, C = spec.C;
  const S* src = patches;
  for (std::int64_t gy = 0; gy < spec.grid_h(); ++gy)
    for (std::int64_t gx = 0; gx < spec.grid_w(); ++gx)
      for (std::int64_t dy = 0; dy < p; ++dy) {
        S* dst = img + ((gy * p + dy) * W + gx * p) * C;
        for (std::int64_t i = 0; i < p * C; ++i) dst[i] = *src++;
      }
}

template <typename S>
void patchify_3d(const S* vol, const PatchSpec& spec, S* out) {
  const std::int64_t p = spec.p, H = spec.H, W = spec.W, C = spec.C;
  S* dst = out;
  for (std::int64_t gz = 0; gz < spec.grid_d(); ++gz)
    for (std::int64_t gy = 0; gy < spec.grid_h(); ++gy)
      for (std::int64_t gx = 0; gx < spec.grid_w(); ++gx)
        for (std::int64_t dz = 0; dz < p; ++dz)
          for (std::int64_t dy = 0; dy < p; ++dy) {
            const S* src = vol + (((gz * p + dz) * H + gy * p + dy) * W + gx * p) * C;
            for (std::int64_t i = 0; i < p * C; ++i) *dst++ = src[i];
          }
}

template <typename S>
void unpatchify_3d(const S* patches, const PatchSpec& spec, S* vol) {
  const std::int64_t p = spec.p, H = spec.H, W = spec.W, C = spec.C;
  const S* src = patches;
  for (std::int64_t gz = 0; gz < spec.grid_d(); ++gz)
    for (std::int64_t gy = 0; gy < spec.grid_h(); ++gy)
      for (std::int64_t gx = 0; gx < spec.grid_w(); ++gx)
        for (std::int64_t dz = 0; dz < p; ++dz)
          for (std::int64_t dy = 0; dy < p; ++dy) {
            S* dst = vol + (((gz * p + dz) * H + gy * p + dy) * W + gx * p) * C;
            for (std::int64_t i = 0; i < p * C; ++i) dst[i] = *src++;
          }
}

// batch of flat images/volumes -> [B x T_patch x patch_dim], gradient-free
template <typename S>
Tensor<S> patchify_batch(const S* data, std::int64_t batch, const PatchSpec& spec) {
  spec.validate();
  Tensor<S> out(Shape{batch, spec.patch_tokens(), spec.patch_dim()});
  const std::int64_t stride = spec.voxels();
  for (std::int64_t b = 0; b < batch; ++b) {
    S* dst = out.data().data() + b * spec.patch_tokens() * spec.patch_dim();
    if (spec.is3d())
      patchify_3d(data + b * stride, spec, dst);
    else
      patchify_2d(data + b * stride, spec, dst);
  }
  return out;
}

// Attention matrices and per-block token states captured during a forward
// pass, for inspection and heatmap extraction.
template <typename S>
struct ForwardTrace {
  std::int64_t batch = 0, heads = 0, tokens = 0;
  std::vector<std::vector<S>> attn;    // per layer, [batch*heads x T x T]
  std::vector<std::vector<S>> tokens_after_block;  // per layer, [batch x T x d]
};

template <typename S>
class ViT {
 public:
  ViTConfig cfg;

  static ViT init(const ViTConfig& config, std::uint64_t seed) {
    config.validate();
    ViT m;
    m.cfg = config;
    CkptMeta meta = m.meta();
    Rng rng(Rng::mix(seed, 0x766974ull));
    for (const auto& [name, shape] : checkpoint_schema(meta, config.num_classes)) {
      Tensor<S> t(shape, S(0), true);
      const bool is_gamma = name.ends_with("gamma");
      const bool is_weight_matrix = name.ends_with("weight") || name == "pos_embed";
      if (is_gamma)
        for (auto& v : t.data()) v = S(1);
      else if (is_weight_matrix && name != "cls_token")
        for (auto& v : t.data()) v = static_cast<S>(rng.truncated_normal(0.02));
      // cls_token, betas and biases stay zero
      m.params_.emplace_back(name, std::move(t));
    }
    return m;
  }

  static ViT from_checkpoint(const Checkpoint& ckpt, const PatchSpec& patch,
                             double drop_rate = 0.0) {
    validate_checkpoint(ckpt);
    ViTConfig config;
    config.layers = ckpt.meta.layers;
    config.dim = ckpt.meta.dim;
    config.heads = ckpt.meta.heads;
    config.mlp_ratio = ckpt.meta.mlp_ratio;
    config.num_classes = ckpt.num_classes();
    config.patch = patch;
    config.drop_rate = drop_rate;
    config.validate();
    if (ckpt.meta.patch != patch.p)
      tensor_fail("checkpoint patch_embed.weight is for patch size " +
                  std::to_string(ckpt.meta.patch) + ", spec wants " + std::to_string(patch.p));
    if (ckpt.meta.grid != patch.grid())
      tensor_fail("checkpoint pos_embed grid does not match the input geometry");
    ViT m;
    m.cfg = config;
    for (const auto& [name, arr] : ckpt.tensors) {
      Tensor<S> t(arr.shape, S(0), true);
      for (std::size_t i = 0; i < arr.data.size(); ++i) t.data()[i] = static_cast<S>(arr.data[i]);
      m.params_.emplace_back(name, std::move(t));
    }
    return m;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.meta = meta();
    for (const auto& [name, t] : params_) {
      NamedArray arr;
      arr.shape = t.shape();
      arr.data.resize(t.data().size());
      for (std::size_t i = 0; i < arr.data.size(); ++i)
        arr.data[i] = static_cast<float>(t.data()[i]);
      ckpt.tensors.emplace_back(name, std::move(arr));
    }
    return ckpt;
  }

  CkptMeta meta() const {
    return CkptMeta{cfg.layers, cfg.dim, cfg.heads, cfg.mlp_ratio, static_cast<int>(cfg.patch.p),
                    cfg.patch.grid()};
  }

  Tensor<S>& param(const std::string& name) {
    for (auto& [n, t] : params_)
      if (n == name) return t;
    tensor_fail("model has no parameter " + name);
  }
  const Tensor<S>& param(const std::string& name) const {
    return const_cast<ViT*>(this)->param(name);
  }

  std::vector<std::pair<std::string, Tensor<S>>>& params() { return params_; }
  const std::vector<std::pair<std::string, Tensor<S>>>& params() const { return params_; }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  // patches: [B x T_patch x patch_dim]
  Tensor<S> forward_patches(const Tensor<S>& patches, bool train = false,
                            ForwardTrace<S>* trace = nullptr, std::uint64_t drop_key = 0) {
    const std::int64_t b = patches.dim(0);
    const std::int64_t tp = cfg.patch.patch_tokens();
    const std::int64_t t = tp + 1;
    const std::int64_t d = cfg.dim, h = cfg.heads, dh = d / h;
    if (patches.ndim() != 3 || patches.dim(1) != tp || patches.dim(2) != cfg.patch.patch_dim())
      tensor_fail("patch batch " + shape_str(patches.shape()) +
                  " does not match patch_embed.weight geometry");
    const auto& pos = param("pos_embed");
    if (pos.dim(0) != t)
      tensor_fail("pos_embed has " + std::to_string(pos.dim(0)) + " rows, input needs " +
                  std::to_string(t));
    if (trace) {
      trace->batch = b;
      trace->heads = h;
      trace->tokens = t;
      trace->attn.clear();
      trace->tokens_after_block.clear();
    }
    const bool drop = train && cfg.drop_rate > 0.0;
    std::uint64_t drop_ctr = 0;
    auto maybe_drop = [&](Tensor<S> x) {
      return drop ? dropout(x, cfg.drop_rate, Rng::mix(drop_key, ++drop_ctr)) : x;
    };

    Tensor<S> kernel = reshape(param("patch_embed.weight"), Shape{cfg.patch.patch_dim(), d});
    Tensor<S> x = linear(patches, kernel, param("patch_embed.bias"));  // [B x Tp x d]
    x = concat(expand0(param("cls_token"), b), x, 1);                  // [B x T x d]
    x = maybe_drop(add(x, pos));
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    for (int layer = 0; layer < cfg.layers; ++layer) {
      const std::string bp = "blocks." + std::to_string(layer) + ".";
      Tensor<S> a = layer_norm(x, param(bp + "norm1.gamma"), param(bp + "norm1.beta"));
      Tensor<S> qkv = linear(a, param(bp + "attn.qkv.weight"), param(bp + "attn.qkv.bias"));
      qkv = permute(reshape(qkv, Shape{b, t, 3, h, dh}), {2, 0, 3, 1, 4});  // [3 x B x h x T x dh]
      Tensor<S> q = reshape(slice(qkv, 0, 0, 1), Shape{b * h, t, dh});
      Tensor<S> k = reshape(slice(qkv, 0, 1, 1), Shape{b * h, t, dh});
      Tensor<S> v = reshape(slice(qkv, 0, 2, 1), Shape{b * h, t, dh});
      std::shared_ptr<std::vector<S>> attn;
      Tensor<S> o = scaled_dot_attention(q, k, v, att_scale, trace ? &attn : nullptr);
      if (trace) trace->attn.push_back(*attn);
      o = reshape(permute(reshape(o, Shape{b, h, t, dh}), {0, 2, 1, 3}), Shape{b, t, d});
      o = maybe_drop(linear(o, param(bp + "attn.proj.weight"), param(bp + "attn.proj.bias")));
      x = add(x, o);
      Tensor<S> m = layer_norm(x, param(bp + "norm2.gamma"), param(bp + "norm2.beta"));
      m = gelu(linear(m, param(bp + "mlp.fc1.weight"), param(bp + "mlp.fc1.bias")));
      m = maybe_drop(linear(m, param(bp + "mlp.fc2.weight"), param(bp + "mlp.fc2.bias")));
      x = add(x, m);
      if (trace) trace->tokens_after_block.push_back(x.data());
    }
    x = layer_norm(x, param("norm.gamma"), param("norm.beta"));
    Tensor<S> cls = reshape(slice(x, 1, 0, 1), Shape{b, d});
    return linear(cls, param("head.weight"), param("head.bias"));  // [B x K]
  }

  // images: batch-major flat pixel data, each sample H*W*C (or D*H*W*C)
  Tensor<S> forward_images(const S* data, std::int64_t batch, bool train = false,
                           ForwardTrace<S>* trace = nullptr, std::uint64_t drop_key = 0) {
    return forward_patches(patchify_batch(data, batch, cfg.patch), train, trace, drop_key);
  }

 private:
  std::vector<std::pair<std::string, Tensor<S>>> params_;
};

// Class-token attention row from the final layer, head-averaged, as a patch
// grid plus a bilinear upsample to input resolution, min-max normalized.
template <typename S>
struct AttentionMapResult {
  std::vector<S> grid;     // grid_h x grid_w, raw head-averaged mass
  std::vector<S> heatmap;  // H x W in [0, 1]
  std::vector<S> probs;    // K
  int predicted = 0;
};

template <typename S>
AttentionMapResult<S> extract_attention_map(ViT<S>& model, const S* image) {
  const PatchSpec& spec = model.cfg.patch;
  if (spec.is3d()) tensor_fail("attention-map extraction supports 2D models only");
  ForwardTrace<S> trace;
  Tensor<S> logits = model.forward_images(image, 1, false, &trace);
  const std::int64_t t = trace.tokens, h = trace.heads;
  const std::int64_t gh = spec.grid_h(), gw = spec.grid_w();

  AttentionMapResult<S> out;
  out.grid.assign(static_cast<std::size_t>(gh * gw), S(0));
  const auto& last = trace.attn.back();
  for (std::int64_t head = 0; head < h; ++head) {
    const S* row = last.data() + head * t * t;  // class-token row is row 0
    for (std::int64_t j = 0; j < t - 1; ++j)
      out.grid[static_cast<std::size_t>(j)] += row[j + 1] / static_cast<S>(h);
  }

  // bilinear upsample (align corners) to H x W, then min-max normalize
  out.heatmap.assign(static_cast<std::size_t>(spec.H * spec.W), S(0));
  for (std::int64_t y = 0; y < spec.H; ++y)
    for (std::int64_t x = 0; x < spec.W; ++x) {
      double sy = gh == 1 ? 0.0 : static_cast<double>(y) * (gh - 1) / (spec.H - 1);
      double sx = gw == 1 ? 0.0 : static_cast<double>(x) * (gw - 1) / (spec.W - 1);
      std::int64_t y0 = static_cast<std::int64_t>(sy), x0 = static_cast<std::int64_t>(sx);
      std::int64_t y1 = std::min(y0 + 1, gh - 1), x1 = std::min(x0 + 1, gw - 1);
      double fy = sy - y0, fx = sx - x0;
      double v = (1 - fy) * ((1 - fx) * out.grid[y0 * gw + x0] + fx * out.grid[y0 * gw + x1]) +
                 fy * ((1 - fx) * out.grid[y1 * gw + x0] + fx * out.grid[y1 * gw + x1]);
      out.heatmap[static_cast<std::size_t>(y * spec.W + x)] = static_cast<S>(v);
    }
  S lo = out.heatmap[0], hi = out.heatmap[0];
  for (S v : out.heatmap) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi > lo)
    for (S& v : out.heatmap) v = (v - lo) / (hi - lo);
  else
    for (S& v : out.heatmap) v = S(0);

  Tensor<S> probs = softmax(logits, 1);
  out.probs = probs.data();
  out.predicted = 0;
  for (std::size_t i = 1; i < out.probs.size(); ++i)
    if (out.probs[i] > out.probs[static_cast<std::size_t>(out.predicted)])
      out.predicted = static_cast<int>(i);
  return out;
}

}  // namespace vitlab
