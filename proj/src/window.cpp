#include "swinlab/window.hpp"

#include <string>

namespace swinlab {

namespace {

std::string geom(Index h, Index w, Index m) {
  return "H=" + std::to_string(h) + ", W=" + std::to_string(w) + ", M=" + std::to_string(m);
}

void require_bhwc(const Tensor& x, const char* op) {
  if (x.rank() != 4) throw DimensionError(std::string(op) + " expects [B, H, W, C], got " + to_string(x.shape()));
}

}  // namespace

WindowGrid::WindowGrid(Index h, Index w, Index m, Index s) : height(h), width(w), window(m), shift(s) {
  if (m < 1 || h < 1 || w < 1) throw GeometryError("window grid extents must be positive: " + geom(h, w, m));
  if (h % m != 0 || w % m != 0) throw GeometryError("feature map not divisible by window: " + geom(h, w, m));
  if (s < 0 || s >= m) throw GeometryError("shift " + std::to_string(s) + " must lie in [0, M) for " + geom(h, w, m));
}

RelIndex relative_index(Index m) {
  if (m < 1) throw ParameterError("relative_index needs M >= 1, got " + std::to_string(m));
  const Index n = m * m;
  const Index side = 2 * m - 1;
  std::vector<Index> idx(static_cast<std::size_t>(n * n));
  for (Index i = 0; i < n; ++i) {
    const Index yi = i / m, xi = i % m;
    for (Index j = 0; j < n; ++j) {
      const Index yj = j / m, xj = j % m;
      idx[static_cast<std::size_t>(i * n + j)] = (yi - yj + m - 1) * side + (xi - xj + m - 1);
    }
  }
  return RelIndex{m, make_index_map(std::move(idx))};
}

Tensor window_partition(const Tensor& x, Index m) {
  require_bhwc(x, "window_partition");
  const Index b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (m < 1 || h % m != 0 || w % m != 0) {
    throw GeometryError("window_partition: feature map not divisible by window: " + geom(h, w, m));
  }
  const Index nwh = h / m, nww = w / m;
  std::vector<Index> idx(static_cast<std::size_t>(x.numel()));
  std::size_t k = 0;
  for (Index bi = 0; bi < b; ++bi)
    for (Index wy = 0; wy < nwh; ++wy)
      for (Index wx = 0; wx < nww; ++wx)
        for (Index py = 0; py < m; ++py)
          for (Index px = 0; px < m; ++px) {
            const Index base = ((bi * h + wy * m + py) * w + wx * m + px) * c;
            for (Index ci = 0; ci < c; ++ci) idx[k++] = base + ci;
          }
  return gather(x, make_index_map(std::move(idx)), Shape{b * nwh * nww, m * m, c});
}

Tensor window_reverse(const Tensor& windows, Index m, Index h, Index w) {
  if (windows.rank() != 3) {
    throw DimensionError("window_reverse expects [B*nW, M^2, C], got " + to_string(windows.shape()));
  }
  if (m < 1 || h % m != 0 || w % m != 0) {
    throw GeometryError("window_reverse: feature map not divisible by window: " + geom(h, w, m));
  }
  const Index nw = (h / m) * (w / m);
  const Index c = windows.dim(2);
  if (windows.dim(1) != m * m || windows.dim(0) % nw != 0) {
    throw GeometryError("window_reverse: extents " + to_string(windows.shape()) + " inconsistent with " + geom(h, w, m));
  }
  const Index b = windows.dim(0) / nw;
  const Index nww = w / m;
  std::vector<Index> idx(static_cast<std::size_t>(windows.numel()));
  std::size_t k = 0;
  for (Index bi = 0; bi < b; ++bi)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const Index win = bi * nw + (y / m) * nww + (x / m);
        const Index patch = (y % m) * m + (x % m);
        const Index base = (win * m * m + patch) * c;
        for (Index ci = 0; ci < c; ++ci) idx[k++] = base + ci;
      }
  return gather(windows, make_index_map(std::move(idx)), Shape{b, h, w, c});
}

Tensor cyclic_shift(const Tensor& x, Index s) {
  require_bhwc(x, "cyclic_shift");
  const Index b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (s >= std::min(h, w) || -s >= std::min(h, w)) {
    throw GeometryError("cyclic_shift: |s|=" + std::to_string(s < 0 ? -s : s) + " must be < min(H, W) for H=" +
                        std::to_string(h) + ", W=" + std::to_string(w));
  }
  std::vector<Index> idx(static_cast<std::size_t>(x.numel()));
  std::size_t k = 0;
  for (Index bi = 0; bi < b; ++bi)
    for (Index y = 0; y < h; ++y)
      for (Index xx = 0; xx < w; ++xx) {
        const Index sy = ((y + s) % h + h) % h;
        const Index sx = ((xx + s) % w + w) % w;
        const Index base = ((bi * h + sy) * w + sx) * c;
        for (Index ci = 0; ci < c; ++ci) idx[k++] = base + ci;
      }
  return gather(x, make_index_map(std::move(idx)), x.shape());
}

Tensor shift_attention_mask(Index h, Index w, Index m, Index s) {
  const WindowGrid grid(h, w, m, s);
  // Region label of each position in the shifted frame; three bands per axis.
  auto band = [m, s](Index p, Index extent) -> Index {
    if (s == 0) return 0;
    if (p < extent - m) return 0;
    if (p < extent - s) return 1;
    return 2;
  };
  const Index nw = grid.num_windows();
  const Index n = m * m;
  Buffer v(static_cast<std::size_t>(nw * n * n), 0.0);
  std::vector<Index> labels(static_cast<std::size_t>(n));
  for (Index wy = 0; wy < grid.windows_per_col(); ++wy)
    for (Index wx = 0; wx < grid.windows_per_row(); ++wx) {
      const Index win = wy * grid.windows_per_row() + wx;
      for (Index p = 0; p < n; ++p) {
        const Index y = wy * m + p / m, x = wx * m + p % m;
        labels[p] = band(y, h) * 3 + band(x, w);
      }
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j)
          v[static_cast<std::size_t>((win * n + i) * n + j)] = labels[i] == labels[j] ? 0.0 : kMaskValue;
    }
  return Tensor(Shape{nw, n, n}, std::move(v));
}

Tensor pad_bottom_right(const Tensor& x, Index nh, Index nwd) {
  require_bhwc(x, "pad_bottom_right");
  const Index b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (nh < h || nwd < w) throw GeometryError("pad_bottom_right cannot shrink " + to_string(x.shape()));
  if (nh == h && nwd == w) return x;
  std::vector<Index> idx(static_cast<std::size_t>(b * nh * nwd * c));
  std::size_t k = 0;
  for (Index bi = 0; bi < b; ++bi)
    for (Index y = 0; y < nh; ++y)
      for (Index xx = 0; xx < nwd; ++xx)
        for (Index ci = 0; ci < c; ++ci)
          idx[k++] = (y < h && xx < w) ? ((bi * h + y) * w + xx) * c + ci : -1;
  return gather(x, make_index_map(std::move(idx)), Shape{b, nh, nwd, c});
}

Tensor crop_top_left(const Tensor& x, Index nh, Index nwd) {
  require_bhwc(x, "crop_top_left");
  const Index b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (nh > h || nwd > w) throw GeometryError("crop_top_left cannot grow " + to_string(x.shape()));
  if (nh == h && nwd == w) return x;
  std::vector<Index> idx(static_cast<std::size_t>(b * nh * nwd * c));
  std::size_t k = 0;
  for (Index bi = 0; bi < b; ++bi)
    for (Index y = 0; y < nh; ++y)
      for (Index xx = 0; xx < nwd; ++xx)
        for (Index ci = 0; ci < c; ++ci) idx[k++] = ((bi * h + y) * w + xx) * c + ci;
  return gather(x, make_index_map(std::move(idx)), Shape{b, nh, nwd, c});
}

}  // namespace swinlab
