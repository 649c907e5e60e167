#pragma once

#include <cstdint>
#include <utility>

#include "vitlab/vit.hpp"

namespace vitlab {

enum class FlopsMode {
  PaperCompatible,  // 1 FLOP per MAC, dense projections only
  Full,             // adds attention matmuls, patch embedding, head
};

struct CostReport {
  std::int64_t t_patch = 0;
  std::int64_t t_total = 0;
  std::int64_t macs_qkv = 0;
  std::int64_t macs_proj = 0;
  std::int64_t macs_mlp = 0;
  std::int64_t macs_attn_scores = 0;
  std::int64_t macs_attn_apply = 0;
  std::int64_t macs_patch_embed = 0;
  std::int64_t macs_head = 0;
  std::int64_t total_macs = 0;
  double total_gflops = 0.0;
  FlopsMode mode = FlopsMode::PaperCompatible;
};

inline std::pair<std::int64_t, std::int64_t> token_count(const PatchSpec& spec) {
  spec.validate();
  return {spec.patch_tokens(), spec.total_tokens()};
}

inline CostReport model_flops(const ViTConfig& cfg, FlopsMode mode = FlopsMode::PaperCompatible) {
  cfg.validate();
  const std::int64_t L = cfg.layers, d = cfg.dim, r = cfg.mlp_ratio;
  CostReport rep;
  rep.mode = mode;
  auto [tp, tt] = token_count(cfg.patch);
  rep.t_patch = tp;
  rep.t_total = tt;
  rep.macs_qkv = L * 3 * tt * d * d;
  rep.macs_proj = L * tt * d * d;
  rep.macs_mlp = L * 2 * r * tt * d * d;
  rep.macs_attn_scores = L * tt * tt * d;
  rep.macs_attn_apply = L * tt * tt * d;
  rep.macs_patch_embed = tp * cfg.patch.patch_dim() * d;
  rep.macs_head = d * cfg.num_classes;
  rep.total_macs = rep.macs_qkv + rep.macs_proj + rep.macs_mlp;
  if (mode == FlopsMode::Full)
    rep.total_macs +=
        rep.macs_attn_scores + rep.macs_attn_apply + rep.macs_patch_embed + rep.macs_head;
  rep.total_gflops = static_cast<double>(rep.total_macs) / 1e9;
  return rep;
}

// Attention matmul MACs over patch tokens only (class token excluded), so
// patch-size halving ratios come out exact.
inline std::int64_t attention_patch_token_macs(const ViTConfig& cfg) {
  auto [tp, tt] = token_count(cfg.patch);
  return cfg.layers * 2 * tp * tp * static_cast<std::int64_t>(cfg.dim);
}

// Growth of the attention cost when the patch edge shrinks by factor N.
inline double attention_scaling_ratio(double n, int dims) {
  if (n < 1.0) tensor_fail("attention_scaling_ratio requires N >= 1");
  if (dims != 2 && dims != 3) tensor_fail("attention_scaling_ratio dims must be 2 or 3");
  const double n2 = n * n;
  return dims == 2 ? n2 * n2 : n2 * n2 * n2;
}

}  // namespace vitlab
