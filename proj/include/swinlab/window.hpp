#pragma once

#include "swinlab/ops.hpp"
#include "swinlab/tensor.hpp"

namespace swinlab {

/// Additive mask value for pairs that straddle a cyclic-shift seam. Finite so
/// that gradients through masked logits stay finite.
inline constexpr double kMaskValue = -1e9;

/// Window tiling of a feature map. Windows and the patches inside a window
/// are both enumerated row-major.
struct WindowGrid {
  WindowGrid(Index height, Index width, Index window, Index shift = 0);

  Index height;
  Index width;
  Index window;
  Index shift;

  Index windows_per_row() const { return width / window; }
  Index windows_per_col() const { return height / window; }
  Index num_windows() const { return windows_per_row() * windows_per_col(); }
  Index patches_per_window() const { return window * window; }
};

/// Table offsets for every (query, key) patch pair of an M x M window.
/// Entry (i, j) = (dy + M - 1) * (2M - 1) + (dx + M - 1) where dy, dx are the
/// row and column offsets of patch i relative to patch j.
struct RelIndex {
  Index window = 0;
  IndexMap index;  // M^2 x M^2, row-major

  Index table_size() const { return (2 * window - 1) * (2 * window - 1); }
  Index patches() const { return window * window; }
  Index at(Index i, Index j) const { return (*index)[static_cast<std::size_t>(i * patches() + j)]; }
  Index center() const { return (window - 1) * (2 * window - 1) + (window - 1); }
};

RelIndex relative_index(Index window);

/// [B, H, W, C] -> [B * nW, M^2, C]. H and W must be multiples of M.
Tensor window_partition(const Tensor& x, Index window);

/// Inverse of window_partition: [B * nW, M^2, C] -> [B, H, W, C].
Tensor window_reverse(const Tensor& windows, Index window, Index height, Index width);

/// Torus roll of [B, H, W, C] by (-shift, -shift); negative shifts roll back.
Tensor cyclic_shift(const Tensor& x, Index shift);

/// [nW, M^2, M^2] additive masks: 0 for pairs from the same pre-shift region,
/// kMaskValue otherwise. All zeros when shift == 0.
Tensor shift_attention_mask(Index height, Index width, Index window, Index shift);

/// Zero-pads [B, H, W, C] on the bottom/right to [B, new_h, new_w, C].
Tensor pad_bottom_right(const Tensor& x, Index new_h, Index new_w);

/// Keeps the top-left [B, new_h, new_w, C] corner of [B, H, W, C].
Tensor crop_top_left(const Tensor& x, Index new_h, Index new_w);

/// Smallest multiple of `window` that is >= extent.
inline Index padded_extent(Index extent, Index window) { return (extent + window - 1) / window * window; }

}  // namespace swinlab
