#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "swinlab/tensor.hpp"

namespace swinlab {

/// Synthetic 8-way task: an anchor blob in channel 0 near the image center
/// and a satellite blob in channel 1 displaced from it in one of `classes`
/// directions. The label is the direction.
struct BlobTaskConfig {
  Index image_size = 64;
  Index classes = 8;
  double radius = 12.0;
  double jitter = 3.0;  // anchor displacement, uniform in [-jitter, jitter]
  double sigma = 2.5;
  double noise = 0.1;
  /// Per-sample object scale drawn uniformly from [1, max_scale]; multiplies
  /// radius and sigma.
  double max_scale = 1.0;

  /// Same scene geometry rendered on a new_size x new_size canvas.
  BlobTaskConfig resized(Index new_size) const;
};

/// Deterministic, lazily generated dataset: sample i depends only on
/// (seed, i).
class BlobDataset {
 public:
  BlobDataset(Index size, std::uint64_t seed, BlobTaskConfig cfg = {});

  Index size() const { return size_; }
  const BlobTaskConfig& config() const { return cfg_; }
  int label(Index i) const;

  /// Writes image i as [h, w, 3] into `out`.
  void render(Index i, std::span<double> out) const;

  /// [n, h, w, 3] images for the given sample ids.
  Tensor images(std::span<const Index> ids) const;
  std::vector<int> labels(std::span<const Index> ids) const;

 private:
  Index size_;
  std::uint64_t seed_;
  BlobTaskConfig cfg_;
};

}  // namespace swinlab
