#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "swinlab/attention.hpp"
#include "swinlab/ops.hpp"
#include "swinlab/window.hpp"

using namespace swinlab;

namespace {

/// Per-window, per-head loops over the same math as attend_dot / attend_cosine.
std::vector<double> attention_oracle(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg,
                                     const Tensor& bias, const Tensor& mask) {
  const Index nw = x.dim(0), n = x.dim(1), c = x.dim(2), heads = cfg.heads, d = cfg.head_dim;
  const Index inner = heads * d;
  std::vector<double> out(static_cast<std::size_t>(nw * n * c), 0.0);
  for (Index win = 0; win < nw; ++win) {
    // qkv[s][i][h*d + j]
    std::vector<double> qkv(static_cast<std::size_t>(3 * n * inner), 0.0);
    for (Index s = 0; s < 3; ++s)
      for (Index i = 0; i < n; ++i)
        for (Index col = 0; col < inner; ++col) {
          double acc = w.qkv_b[s * inner + col];
          for (Index p = 0; p < c; ++p) acc += x[(win * n + i) * c + p] * w.qkv_w[p * 3 * inner + s * inner + col];
          qkv[(s * n + i) * inner + col] = acc;
        }
    auto at = [&](Index s, Index i, Index h, Index j) { return qkv[(s * n + i) * inner + h * d + j]; };
    std::vector<double> merged(static_cast<std::size_t>(n * inner), 0.0);
    for (Index h = 0; h < heads; ++h)
      for (Index i = 0; i < n; ++i) {
        std::vector<double> logit(static_cast<std::size_t>(n));
        for (Index j = 0; j < n; ++j) {
          double dot = 0.0, nq = 0.0, nk = 0.0;
          for (Index e = 0; e < d; ++e) {
            dot += at(0, i, h, e) * at(1, j, h, e);
            nq += at(0, i, h, e) * at(0, i, h, e);
            nk += at(1, j, h, e) * at(1, j, h, e);
          }
          double l = cfg.variant == AttentionVariant::Dot
                         ? dot / std::sqrt(static_cast<double>(d))
                         : dot / (std::sqrt(nq) * std::sqrt(nk)) / std::max(w.tau[h], cfg.tau_min);
          if (bias.defined()) l += bias[(h * n + i) * n + j];
          if (mask.defined()) l += mask[((win % mask.dim(0)) * n + i) * n + j];
          logit[static_cast<std::size_t>(j)] = l;
        }
        const double mx = *std::max_element(logit.begin(), logit.end());
        double z = 0.0;
        for (double& l : logit) z += (l = std::exp(l - mx));
        for (Index e = 0; e < d; ++e) {
          double acc = 0.0;
          for (Index j = 0; j < n; ++j) acc += logit[static_cast<std::size_t>(j)] / z * at(2, j, h, e);
          merged[i * inner + h * d + e] = acc;
        }
      }
    for (Index i = 0; i < n; ++i)
      for (Index o = 0; o < c; ++o) {
        double acc = w.proj_b[o];
        for (Index p = 0; p < inner; ++p) acc += merged[i * inner + p] * w.proj_w[p * c + o];
        out[(win * n + i) * c + o] = acc;
      }
  }
  return out;
}

AttentionWeights random_weights(Index c, const AttentionConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  AttentionWeights w = AttentionWeights::make(c, cfg, rng);
  fill_uniform(w.qkv_w, rng, 0.6);
  fill_uniform(w.qkv_b, rng, 0.3);
  fill_uniform(w.proj_w, rng, 0.6);
  fill_uniform(w.proj_b, rng, 0.3);
  if (w.tau.defined()) fill_uniform(w.tau, rng, 0.5);
  if (w.tau.defined())
    for (double& t : w.tau.mutable_values()) t = std::abs(t) + 0.05;
  return w;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a[k] - b[k]));
  return worst;
}

}  // namespace

TEST_CASE("both variants match a loop oracle with bias and mask") {
  for (auto variant : {AttentionVariant::Dot, AttentionVariant::Cosine}) {
    CAPTURE(to_string(variant));
    AttentionConfig cfg;
    cfg.heads = 2;
    cfg.head_dim = 3;
    cfg.variant = variant;
    const AttentionWeights w = random_weights(5, cfg, 1);
    const Tensor x = oracle::random({8, 16, 5}, 2);
    const Tensor bias = oracle::random({2, 16, 16}, 3, -0.5, 0.5);
    const Tensor mask = shift_attention_mask(8, 8, 4, 2);
    const Tensor y = attend(x, w, cfg, bias, mask);
    REQUIRE(y.shape() == Shape{8, 16, 5});
    CHECK(max_abs_diff(y.values(), attention_oracle(x, w, cfg, bias, mask)) < 1e-12);
    const Tensor plain = attend(x, w, cfg, Tensor(), Tensor());
    CHECK(max_abs_diff(plain.values(), attention_oracle(x, w, cfg, Tensor(), Tensor())) < 1e-12);
  }
}

TEST_CASE("cosine self-logit is 1/tau and tau is floored") {
  AttentionConfig cfg;
  cfg.heads = 2;
  cfg.head_dim = 4;
  cfg.variant = AttentionVariant::Cosine;
  AttentionWeights w = random_weights(8, cfg, 4);
  // Make k equal to q.
  auto qw = w.qkv_w.mutable_values();
  auto qb = w.qkv_b.mutable_values();
  for (Index r = 0; r < 8; ++r)
    for (Index col = 0; col < 8; ++col) qw[r * 24 + 8 + col] = qw[r * 24 + col];
  for (Index col = 0; col < 8; ++col) qb[8 + col] = qb[col];
  w.tau.mutable_values()[0] = 0.5;
  w.tau.mutable_values()[1] = 1e-5;
  AttentionTrace trace;
  attend(oracle::random({1, 9, 8}, 5), w, cfg, Tensor(), Tensor(), &trace);
  for (Index i = 0; i < 9; ++i) {
    CHECK(trace.pre_bias_logits[(0 * 9 + i) * 9 + i] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(trace.pre_bias_logits[(1 * 9 + i) * 9 + i] == doctest::Approx(100.0).epsilon(1e-12));
  }
  for (double l : trace.pre_bias_logits.values()) CHECK(std::abs(l) <= 100.0 * (1 + 1e-12));
}

TEST_CASE("broken tau floor trips the debug bound check") {
  AttentionConfig cfg;
  cfg.heads = 1;
  cfg.head_dim = 4;
  AttentionWeights w = random_weights(4, cfg, 6);
  w.tau.mutable_values()[0] = 1e-4;
  const bool was = debug_checks();
  set_debug_checks(true);
  inject_tau_floor(1e-4);
  // The check compares against the contract floor, not the injected one.
  CHECK_THROWS_AS(attend(oracle::random({2, 4, 4}, 7), w, cfg, Tensor(), Tensor()), ContractError);
  inject_tau_floor(std::nullopt);
  CHECK_NOTHROW(attend(oracle::random({2, 4, 4}, 7), w, cfg, Tensor(), Tensor()));
  set_debug_checks(was);
}

TEST_CASE("sequential path matches batch values and gradients") {
  for (auto variant : {AttentionVariant::Dot, AttentionVariant::Cosine}) {
    AttentionConfig cfg;
    cfg.heads = 2;
    cfg.head_dim = 4;
    cfg.variant = variant;
    const AttentionWeights w = random_weights(8, cfg, 8);
    const Tensor bias = oracle::random({2, 16, 16}, 9, -0.5, 0.5);
    const Tensor mask = shift_attention_mask(8, 8, 4, 2);
    Tensor x = oracle::random({8, 16, 8}, 10, -2, 2, true);

    auto run = [&](bool sequential, std::vector<double>& grad) {
      AttentionConfig c = cfg;
      c.sequential = sequential;
      x.zero_grad();
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = reduce_sum(attend(x, w, c, bias, mask) * oracle::random({8, 16, 8}, 11));
      }
      tape.backward(loss);
      grad = x.grad().to_vector();
      return loss.item();
    };
    std::vector<double> gb, gs;
    const double lb = run(false, gb);
    const double ls = run(true, gs);
    CHECK(std::abs(lb - ls) < 1e-9);
    CHECK(max_abs_diff(gb, gs) < 1e-9);
  }
}

TEST_CASE("sequential path has a smaller transient footprint") {
  AttentionConfig cfg;
  cfg.heads = 2;
  cfg.head_dim = 4;
  const AttentionWeights w = random_weights(8, cfg, 12);
  const Tensor x = oracle::random({64, 16, 8}, 13);
  auto peak = [&](bool sequential) {
    AttentionConfig c = cfg;
    c.sequential = sequential;
    NoGradScope no_grad;
    reset_stats();
    const std::int64_t base = stats().live_bytes;
    attend(x, w, c, Tensor(), Tensor());
    return stats().peak_live_bytes - base;
  };
  const auto batch = peak(false);
  const auto sequential = peak(true);
  CAPTURE(batch);
  CAPTURE(sequential);
  CHECK(sequential < batch);
}

TEST_CASE("window order does not change per-window output") {
  AttentionConfig cfg;
  cfg.heads = 2;
  cfg.head_dim = 2;
  const AttentionWeights w = random_weights(4, cfg, 14);
  const Tensor x = oracle::random({3, 9, 4}, 15);
  const Tensor y = attend(x, w, cfg, Tensor(), Tensor());
  // Reverse the windows.
  std::vector<double> rev;
  for (Index win = 2; win >= 0; --win)
    for (Index k = 0; k < 36; ++k) rev.push_back(x[win * 36 + k]);
  const Tensor yr = attend(Tensor::from_vector({3, 9, 4}, rev), w, cfg, Tensor(), Tensor());
  for (Index win = 0; win < 3; ++win)
    for (Index k = 0; k < 36; ++k) CHECK(yr[(2 - win) * 36 + k] == doctest::Approx(y[win * 36 + k]).epsilon(1e-13));
}

TEST_CASE("attention stats") {
  // Head 0 uniform over 4 keys, head 1 one-hot.
  std::vector<double> p;
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j) p.push_back(0.25);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j) p.push_back(i == j ? 1.0 : 0.0);
  const HeadStats s = attention_stats(Tensor::from_vector({2, 4, 4}, p));
  CHECK(s.entropy[0] == doctest::Approx(std::log(4.0)));
  CHECK(s.entropy[1] == doctest::Approx(0.0));
  CHECK(s.max_prob[0] == doctest::Approx(0.25));
  CHECK(s.max_prob[1] == doctest::Approx(1.0));
  CHECK_THROWS_AS(attention_stats(Tensor::zeros({4, 4})), DimensionError);
}

TEST_CASE("shape errors name the mismatch") {
  AttentionConfig cfg;
  cfg.heads = 2;
  cfg.head_dim = 2;
  const AttentionWeights w = random_weights(4, cfg, 16);
  CHECK_THROWS_AS(attend(oracle::random({1, 4, 5}, 1), w, cfg, Tensor(), Tensor()), DimensionError);
  CHECK_THROWS_AS(attend(oracle::random({1, 4, 4}, 1), w, cfg, Tensor::zeros({1, 4, 4}), Tensor()), DimensionError);
  CHECK_THROWS_AS(parse_attention_variant("sparse"), ConfigError);
}

TEST_CASE("finite differences through cosine attention including tau") {
  AttentionConfig cfg;
  cfg.heads = 2;
  cfg.head_dim = 3;
  AttentionWeights w = random_weights(6, cfg, 17);
  for (auto& [name, p] : w.parameters()) p.set_requires_grad(true);
  Tensor x = oracle::random({2, 4, 6}, 18, -1, 1, true);
  const Tensor bias = oracle::random({2, 4, 4}, 19, -0.5, 0.5);
  const Tensor probe = oracle::random({2, 4, 6}, 20);
  auto loss = [&] { return reduce_sum(attend(x, w, cfg, bias, Tensor()) * probe); };
  auto value = [&] {
    NoGradScope no_grad;
    return loss().item();
  };
  NamedTensors leaves = w.parameters();
  leaves.emplace_back("x", x);
  for (auto& [name, leaf] : leaves) {
    CAPTURE(name);
    for (auto& [n2, l2] : leaves) l2.zero_grad();
    Tape tape;
    Tensor l;
    {
      TapeScope scope(tape);
      l = loss();
    }
    tape.backward(l);
    const std::vector<double> analytic = leaf.grad().to_vector();
    const std::vector<double> numeric = oracle::numeric_grad(value, leaf);
    for (std::size_t k = 0; k < analytic.size(); ++k) CHECK(oracle::rel_err(analytic[k], numeric[k], 1e-4) < 1e-4);
  }
}
