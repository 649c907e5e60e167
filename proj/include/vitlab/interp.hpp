#pragma once

#include <cstdint>
#include <vector>

#include "vitlab/tensor.hpp"

namespace vitlab {

// Multilinear align-corners resampling of a channel-last field of rank 1-3.
// src is laid out [ext0 x ext1 x ... x channels], row-major. Corner samples
// map to corner samples; a target extent of 1 samples coordinate 0.
template <typename S>
std::vector<S> resample_align_corners(const std::vector<S>& src,
                                      const std::vector<std::int64_t>& src_ext,
                                      const std::vector<std::int64_t>& dst_ext,
                                      std::int64_t channels) {
  const int rank = static_cast<int>(src_ext.size());
  if (rank < 1 || rank > 3 || dst_ext.size() != src_ext.size())
    tensor_fail("resample supports rank 1-3 fields with matching target rank");
  std::int64_t src_cells = 1, dst_cells = 1;
  for (auto e : src_ext) src_cells *= e;
  for (auto e : dst_ext) dst_cells *= e;
  if (static_cast<std::int64_t>(src.size()) != src_cells * channels)
    tensor_fail("resample source length does not match extents");

  std::vector<std::int64_t> src_stride(static_cast<std::size_t>(rank));
  std::int64_t acc = channels;
  for (int a = rank; a-- > 0;) {
    src_stride[static_cast<std::size_t>(a)] = acc;
    acc *= src_ext[static_cast<std::size_t>(a)];
  }

  std::vector<S> dst(static_cast<std::size_t>(dst_cells * channels));
  std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
  std::vector<std::int64_t> lo(static_cast<std::size_t>(rank)), hi(static_cast<std::size_t>(rank));
  std::vector<double> frac(static_cast<std::size_t>(rank));

  for (std::int64_t cell = 0; cell < dst_cells; ++cell) {
    for (int a = 0; a < rank; ++a) {
      const std::int64_t se = src_ext[static_cast<std::size_t>(a)];
      const std::int64_t de = dst_ext[static_cast<std::size_t>(a)];
      double coord = 0.0;
      if (de > 1 && se > 1)
        coord = static_cast<double>(idx[static_cast<std::size_t>(a)]) *
                static_cast<double>(se - 1) / static_cast<double>(de - 1);
      lo[static_cast<std::size_t>(a)] = static_cast<std::int64_t>(coord);
      hi[static_cast<std::size_t>(a)] =
          std::min(lo[static_cast<std::size_t>(a)] + 1, se - 1);
      frac[static_cast<std::size_t>(a)] =
          coord - static_cast<double>(lo[static_cast<std::size_t>(a)]);
    }
    S* out = dst.data() + cell * channels;
    for (std::int64_t c = 0; c < channels; ++c) out[c] = S(0);
    const int corners = 1 << rank;
    for (int corner = 0; corner < corners; ++corner) {
      double weight = 1.0;
      std::int64_t off = 0;
      for (int a = 0; a < rank; ++a) {
        const bool upper = (corner >> a) & 1;
        weight *= upper ? frac[static_cast<std::size_t>(a)]
                        : 1.0 - frac[static_cast<std::size_t>(a)];
        off += (upper ? hi[static_cast<std::size_t>(a)] : lo[static_cast<std::size_t>(a)]) *
               src_stride[static_cast<std::size_t>(a)];
      }
      if (weight == 0.0) continue;
      const S* in = src.data() + off;
      for (std::int64_t c = 0; c < channels; ++c)
        out[c] += static_cast<S>(weight * static_cast<double>(in[c]));
    }
    for (int a = rank; a-- > 0;) {
      idx[static_cast<std::size_t>(a)]++;
      if (idx[static_cast<std::size_t>(a)] < dst_ext[static_cast<std::size_t>(a)]) break;
      idx[static_cast<std::size_t>(a)] = 0;
    }
  }
  return dst;
}

}  // namespace vitlab
