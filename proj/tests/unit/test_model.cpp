#include <doctest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "swinlab/dataset.hpp"
#include "swinlab/model.hpp"
#include "swinlab/ops.hpp"

using namespace swinlab;

namespace {

/// LayerNorm over the last axis, in loops.
std::vector<double> ln_oracle(std::span<const double> x, Index c, std::span<const double> gamma,
                              std::span<const double> beta) {
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < x.size() / static_cast<std::size_t>(c); ++r) {
    double mean = 0.0, var = 0.0;
    for (Index k = 0; k < c; ++k) mean += x[r * c + k];
    mean /= static_cast<double>(c);
    for (Index k = 0; k < c; ++k) var += (x[r * c + k] - mean) * (x[r * c + k] - mean);
    var /= static_cast<double>(c);
    for (Index k = 0; k < c; ++k) out[r * c + k] = (x[r * c + k] - mean) / std::sqrt(var + 1e-5) * gamma[k] + beta[k];
  }
  return out;
}

std::vector<double> plus(std::span<const double> a, std::span<const double> b) {
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] + b[k];
  return out;
}

Block random_block(NormVariant norm, Index shift, std::uint64_t seed, double gain = 0.7) {
  std::mt19937_64 rng(seed);
  BlockConfig cfg;
  cfg.norm = norm;
  cfg.attention.heads = 2;
  cfg.attention.head_dim = 4;
  cfg.res_post_gain = gain;
  cfg.resolution = 8;
  cfg.window = 4;
  cfg.shift = shift;
  const BiasProvider bias = BiasProvider::cpb(BiasKind::LogCPB, 4, 2, 16, rng);
  Block b = Block::make(cfg, 8, bias, rng);
  for (auto& [name, p] : [&] {
         NamedTensors all;
         b.collect("", all);
         return all;
       }()) {
    if (name.find("norm") != std::string::npos) continue;
    fill_uniform(p, rng, 0.3);
  }
  return b;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a[k] - b[k]));
  return worst;
}

Tensor blob_batch(Index n, std::uint64_t seed, Index size = 64) {
  BlobTaskConfig cfg;
  cfg = cfg.resized(size);
  const BlobDataset data(n, seed, cfg);
  std::vector<Index> ids(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = i;
  return data.images(ids);
}

}  // namespace

TEST_CASE("block composition per norm placement") {
  const Tensor x = oracle::random({2, 64, 8}, 1);
  for (auto norm : {NormVariant::Pre, NormVariant::Post, NormVariant::Sandwich, NormVariant::ResPost}) {
    CAPTURE(to_string(norm));
    const Block b = random_block(norm, 2, 2);
    NoGradScope no_grad;
    auto ln = [](const LayerNormParams& p, const Tensor& t) {
      return Tensor::from_vector(t.shape(), ln_oracle(t.values(), 8, p.gamma.values(), p.beta.values()));
    };
    std::vector<double> expect;
    switch (norm) {
      case NormVariant::Pre: {
        const Tensor y = Tensor::from_vector(x.shape(), plus(x.values(), b.attention_branch(ln(b.norm1, x)).values()));
        expect = plus(y.values(), b.mlp_branch(ln(b.norm2, y)).values());
        break;
      }
      case NormVariant::Post: {
        const Tensor y = ln(b.norm1, Tensor::from_vector(x.shape(), plus(x.values(), b.attention_branch(x).values())));
        expect = ln(b.norm2, Tensor::from_vector(x.shape(), plus(y.values(), b.mlp_branch(y).values()))).to_vector();
        break;
      }
      case NormVariant::Sandwich: {
        const Tensor y = Tensor::from_vector(
            x.shape(), plus(x.values(), ln(b.norm1_post, b.attention_branch(ln(b.norm1, x))).values()));
        expect = plus(y.values(), ln(b.norm2_post, b.mlp_branch(ln(b.norm2, y))).values());
        break;
      }
      case NormVariant::ResPost: {
        const Tensor y = Tensor::from_vector(x.shape(), plus(x.values(), ln(b.norm1, b.attention_branch(x)).values()));
        expect = plus(y.values(), ln(b.norm2, b.mlp_branch(y)).values());
        break;
      }
    }
    CHECK(max_abs_diff(block_forward(x, b).values(), expect) < 1e-12);
  }
}

TEST_CASE("res-post blocks start as the identity at zero gain") {
  const Tensor x = oracle::random({2, 64, 8}, 3);
  for (Index shift : {0, 2}) {
    const Block b = random_block(NormVariant::ResPost, shift, 4, 0.0);
    NoGradScope no_grad;
    CHECK(block_forward(x, b).to_vector() == x.to_vector());
  }
  ModelConfig cfg = named_config("desk-T");
  const Model m(cfg, 5);
  for (const Block& b : m.blocks()) {
    for (double g : b.norm1.gamma.values()) CHECK(g == 0.0);
    for (double g : b.norm2.gamma.values()) CHECK(g == 0.0);
  }
}

TEST_CASE("unshifted block commutes with a whole-window translation") {
  // Rolling by a multiple of the window maps windows onto windows.
  const Block b = random_block(NormVariant::ResPost, 0, 6);
  const Tensor x = oracle::random({1, 8, 8, 8}, 7);
  auto roll = [](const Tensor& t) { return cyclic_shift(t, 4); };
  NoGradScope no_grad;
  const Tensor y = reshape(block_forward(reshape(x, {1, 64, 8}), b), {1, 8, 8, 8});
  const Tensor yr = reshape(block_forward(reshape(roll(x), {1, 64, 8}), b), {1, 8, 8, 8});
  CHECK(max_abs_diff(yr.values(), roll(y).values()) < 1e-12);
}

TEST_CASE("patchify follows (py, px, c) order") {
  const Tensor img = oracle::random({2, 8, 8, 3}, 8);
  const Tensor p = patchify(img, 4);
  REQUIRE(p.shape() == Shape{2, 4, 48});
  for (Index n = 0; n < 2; ++n)
    for (Index gy = 0; gy < 2; ++gy)
      for (Index gx = 0; gx < 2; ++gx)
        for (Index y = 0; y < 4; ++y)
          for (Index x = 0; x < 4; ++x)
            for (Index c = 0; c < 3; ++c)
              CHECK(p[((n * 4 + gy * 2 + gx) * 16 + y * 4 + x) * 3 + c] ==
                    img[((n * 8 + gy * 4 + y) * 8 + gx * 4 + x) * 3 + c]);
  CHECK_THROWS_AS(patchify(img, 3), GeometryError);
}

TEST_CASE("merge takes (0,0), (1,0), (0,1), (1,1) neighbors") {
  std::vector<double> v;
  for (Index r = 0; r < 4; ++r)
    for (Index c = 0; c < 4; ++c) v.push_back(r * 10 + c);
  const Tensor m = merge_neighbors(Tensor::from_vector({1, 16, 1}, v), 4, 4);
  REQUIRE(m.shape() == Shape{1, 4, 4});
  CHECK(m.to_vector() == std::vector<double>{0, 10, 1, 11, 2, 12, 3, 13, 20, 30, 21, 31, 22, 32, 23, 33});
  CHECK_THROWS_AS(merge_neighbors(Tensor::zeros({1, 9, 1}), 3, 3), GeometryError);
}

TEST_CASE("parameter count equals enumeration") {
  for (auto norm : {NormVariant::Pre, NormVariant::Post, NormVariant::Sandwich, NormVariant::ResPost})
    for (auto bias : {BiasKind::Table, BiasKind::LinearCPB, BiasKind::LogCPB})
      for (auto attn : {AttentionVariant::Dot, AttentionVariant::Cosine}) {
        ModelConfig cfg = named_config("desk-T");
        cfg.norm = norm;
        cfg.bias = bias;
        cfg.attention = attn;
        cfg.extra_ln_period = 2;
        const Model m(cfg, 1);
        Index enumerated = 0;
        std::set<std::string> names;
        for (const auto& [name, p] : m.parameters()) {
          enumerated += p.numel();
          names.insert(name);
        }
        CHECK(names.size() == m.parameters().size());
        CHECK(count_params(cfg) == enumerated);
        CHECK(m.parameter_count() == enumerated);
      }
}

TEST_CASE("named configurations") {
  CHECK(named_config_names().size() == 7);
  const ModelConfig t = named_config("T");
  CHECK(t.embed_dim == 96);
  CHECK(t.depths == std::array<Index, 4>{2, 2, 6, 2});
  CHECK(std::abs(static_cast<double>(count_params(named_config("B"))) - 88e6) / 88e6 < 0.03);
  CHECK(std::abs(static_cast<double>(count_params(named_config("L"))) - 197e6) / 197e6 < 0.03);
  CHECK(std::abs(static_cast<double>(count_params(named_config("G"))) - 3.0e9) / 3.0e9 < 0.05);
  CHECK(named_config("G").extra_ln_period == 6);
  CHECK_THROWS_AS(named_config("XL"), ConfigError);

  const auto geo = stage_geometry(named_config("desk-T"));
  CHECK(geo[0].resolution == 16);
  CHECK(geo[0].shift == 2);
  CHECK(geo[2].resolution == 4);
  CHECK(geo[2].shift == 0);
  CHECK(geo[3].window == 2);
  CHECK(geo[3].channels == 256);
}

TEST_CASE("forward shapes and input validation") {
  const Model m(named_config("desk-T"), 2);
  NoGradScope no_grad;
  const Tensor logits = m.forward(blob_batch(3, 1));
  CHECK(logits.shape() == Shape{3, 8});
  CHECK_THROWS_AS(m.forward(Tensor::zeros({1, 32, 32, 3})), DimensionError);
}

TEST_CASE("signal propagation records every block") {
  ModelConfig cfg = named_config("desk-T");
  cfg.depths = {1, 1, 21, 1};
  const Tensor batch = blob_batch(4, 2);
  for (auto norm : {NormVariant::Pre, NormVariant::ResPost}) {
    cfg.norm = norm;
    const Model m(cfg, 3);
    const auto rows = signal_propagation(m, batch);
    REQUIRE(rows.size() == 24);
    double lo = INFINITY, hi = 0.0;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      CHECK(rows[k].block == static_cast<Index>(k));
      CHECK_FALSE(rows[k].flagged);
      CHECK(rows[k].max_amp >= rows[k].mean_amp);
      lo = std::min(lo, rows[k].mean_amp);
      hi = std::max(hi, rows[k].mean_amp);
    }
    if (norm == NormVariant::ResPost) CHECK(hi / lo <= 10.0);
  }
}

TEST_CASE("weight decay applies to weight matrices only") {
  const Model m(named_config("desk-T"), 4);
  for (const auto& [name, p] : m.parameters()) {
    const bool matrix_weight = p.rank() == 2 && name.ends_with(".weight");
    CHECK(decays(name, p) == matrix_weight);
  }
}
