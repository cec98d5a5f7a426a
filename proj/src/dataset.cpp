#include "swinlab/dataset.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace swinlab {

namespace {

std::mt19937_64 sample_rng(std::uint64_t seed, Index i) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(static_cast<std::uint64_t>(i) >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

BlobTaskConfig BlobTaskConfig::resized(Index new_size) const {
  if (new_size < 8) throw ConfigError("image size must be >= 8");
  BlobTaskConfig out = *this;
  const double f = static_cast<double>(new_size) / static_cast<double>(image_size);
  out.image_size = new_size;
  out.radius = radius * f;
  out.jitter = jitter * f;
  out.sigma = sigma * f;
  return out;
}

BlobDataset::BlobDataset(Index size, std::uint64_t seed, BlobTaskConfig cfg) : size_(size), seed_(seed), cfg_(cfg) {
  if (size < 1) throw ConfigError("dataset must not be empty");
  if (cfg_.classes < 2 || cfg_.image_size < 8 || cfg_.sigma <= 0.0 || cfg_.max_scale < 1.0) throw ConfigError("invalid blob task config");
}

int BlobDataset::label(Index i) const { return static_cast<int>(i % cfg_.classes); }

void BlobDataset::render(Index i, std::span<double> out) const {
  const Index s = cfg_.image_size;
  if (static_cast<Index>(out.size()) != s * s * 3) throw DimensionError("render buffer has the wrong size");
  auto rng = sample_rng(seed_, i);
  std::uniform_real_distribution<double> jitter(-cfg_.jitter, cfg_.jitter);
  std::normal_distribution<double> noise(0.0, cfg_.noise);

  const double scale = cfg_.max_scale > 1.0 ? std::uniform_real_distribution<double>(1.0, cfg_.max_scale)(rng) : 1.0;
  const double centre = 0.5 * static_cast<double>(s - 1);
  const double ax = centre + jitter(rng), ay = centre + jitter(rng);
  const double angle = 2.0 * std::numbers::pi * static_cast<double>(label(i)) / static_cast<double>(cfg_.classes);
  const double radius = cfg_.radius * scale, sigma = cfg_.sigma * scale;
  const double sx = ax + radius * std::cos(angle), sy = ay + radius * std::sin(angle);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (Index y = 0; y < s; ++y)
    for (Index x = 0; x < s; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      double* px = out.data() + (y * s + x) * 3;
      px[0] = std::exp(-((fx - ax) * (fx - ax) + (fy - ay) * (fy - ay)) * inv) + noise(rng);
      px[1] = std::exp(-((fx - sx) * (fx - sx) + (fy - sy) * (fy - sy)) * inv) + noise(rng);
      px[2] = noise(rng);
    }
}

Tensor BlobDataset::images(std::span<const Index> ids) const {
  const Index s = cfg_.image_size, per = s * s * 3;
  Buffer v(static_cast<std::size_t>(per * static_cast<Index>(ids.size())));
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] < 0 || ids[k] >= size_) throw DimensionError("sample id " + std::to_string(ids[k]) + " out of range");
    render(ids[k], std::span<double>(v.data() + static_cast<Index>(k) * per, static_cast<std::size_t>(per)));
  }
  return Tensor(Shape{static_cast<Index>(ids.size()), s, s, 3}, std::move(v));
}

std::vector<int> BlobDataset::labels(std::span<const Index> ids) const {
  std::vector<int> out;
  out.reserve(ids.size());
  for (Index i : ids) out.push_back(label(i));
  return out;
}

}  // namespace swinlab
