#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "oracles.hpp"
#include "swinlab/ops.hpp"
#include "swinlab/training.hpp"

using namespace swinlab;

namespace {

double adamw_scalar(double w, double g, double lr, double wd) {
  const double m = 0.1 * g, v = 0.001 * g * g;
  const double m_hat = m / 0.1, v_hat = v / 0.001;
  // eps sits on sqrt(v) before bias correction.
  return w - lr * wd * w - lr * m_hat / (std::sqrt(v_hat) + 1e-8 / std::sqrt(0.001));
}

void step_scalar(Tensor& w, double g, double lr, double wd) {
  OptimState st;
  st.cfg.weight_decay = wd;
  std::vector<Tensor> params{w};
  const std::vector<double> grad{g};
  const std::vector<std::span<const double>> grads{grad};
  const bool decay[] = {true};
  adamw_step(params, grads, decay, st, lr);
}

double global_norm(const std::vector<std::vector<double>>& gs) {
  double s = 0.0;
  for (const auto& g : gs)
    for (double v : g) s += v * v;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("adamw on a scalar") {
  Tensor w = Tensor::from_vector({1}, {1.0}, true);
  step_scalar(w, 1.0, 0.1, 0.0);
  CHECK(w[0] == doctest::Approx(0.9000000316).epsilon(1e-10));
  CHECK(w[0] == doctest::Approx(adamw_scalar(1.0, 1.0, 0.1, 0.0)).epsilon(1e-14));

  Tensor still = Tensor::from_vector({1}, {0.7}, true);
  step_scalar(still, 0.0, 0.1, 0.0);
  CHECK(still[0] == 0.7);

  Tensor shrink = Tensor::from_vector({1}, {2.0}, true);
  step_scalar(shrink, 0.0, 0.1, 0.05);
  CHECK(shrink[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.05)).epsilon(1e-15));

  OptimState st;
  std::vector<Tensor> params{Tensor::zeros({3}, true)};
  const std::vector<double> bad(2, 0.0);
  const std::vector<std::span<const double>> grads{bad};
  const bool decay[] = {true};
  CHECK_THROWS_AS(adamw_step(params, grads, decay, st, 0.1), DimensionError);
}

TEST_CASE("gradient clipping") {
  std::vector<std::vector<double>> g{{6.0, 8.0}};
  std::vector<std::span<double>> spans{g[0]};
  CHECK(clip_grad_norm(spans, 5.0) == doctest::Approx(10.0));
  CHECK(g[0][0] == doctest::Approx(3.0));
  CHECK(g[0][1] == doctest::Approx(4.0));

  std::vector<std::vector<double>> small{{0.0, 3.0}};
  std::vector<std::span<double>> s2{small[0]};
  clip_grad_norm(s2, 5.0);
  CHECK(small[0] == std::vector<double>{0.0, 3.0});

  std::mt19937_64 rng(1);
  std::normal_distribution<double> dist(0.0, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> gs(3);
    for (auto& v : gs)
      for (int k = 0; k < 7; ++k) v.push_back(dist(rng));
    const auto before = gs;
    std::vector<std::span<double>> sp{gs[0], gs[1], gs[2]};
    const double pre = clip_grad_norm(sp, 5.0);
    CHECK(pre == doctest::Approx(global_norm(before)).epsilon(1e-14));
    CHECK(std::abs(global_norm(gs) - std::min(pre, 5.0)) < 1e-12);
    const double f = gs[0][0] / before[0][0];
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < 7; ++k) CHECK(gs[i][k] == doctest::Approx(before[i][k] * f).epsilon(1e-13));
  }
}

TEST_CASE("warm-up then cosine schedule") {
  const Schedule s{1e-3, 10, 110};
  CHECK(lr_at(s, 0) == 0.0);
  CHECK(lr_at(s, 5) == doctest::Approx(5e-4));
  CHECK(lr_at(s, 10) == 1e-3);
  CHECK(lr_at(s, 60) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(lr_at(s, 110) == doctest::Approx(0.0));
  CHECK_THROWS_AS(lr_at(s, 111), ParameterError);
  CHECK_THROWS_AS(lr_at(s, -1), ParameterError);
}

TEST_CASE("zero learning rate leaves weights unchanged") {
  Model m(named_config("desk-T"), 1);
  const Checkpoint before = snapshot(m);
  TrainConfig tc;
  tc.steps = 3;
  tc.batch = 4;
  tc.lr = 0.0;
  tc.eval_samples = 4;
  const RunReport r = train(m, BlobDataset(16, 2), tc);
  CHECK_FALSE(r.diverged);
  CHECK(r.steps.size() == 3);
  CHECK(snapshot(m) == before);
}

TEST_CASE("fixed seed gives bit-identical runs") {
  auto run = [](std::string& csv) {
    Model m(named_config("desk-T"), 3);
    TrainConfig tc;
    tc.steps = 4;
    tc.batch = 4;
    tc.warmup = 1;
    tc.seed = 9;
    tc.eval_samples = 8;
    const RunReport r = train(m, BlobDataset(32, 4), tc);
    std::ostringstream out;
    write_report_csv(r, out);
    csv = out.str();
    return snapshot(m);
  };
  std::string a, b;
  const Checkpoint ca = run(a);
  const Checkpoint cb = run(b);
  CHECK(ca == cb);
  CHECK(a == b);
  CHECK(a.starts_with("step,loss,grad_norm,lr,flag\n"));
}

TEST_CASE("report steps are monotone and loss falls") {
  Model m(named_config("desk-T"), 5);
  TrainConfig tc;
  tc.steps = 30;
  tc.batch = 8;
  tc.warmup = 3;
  tc.eval_samples = 8;
  const RunReport r = train(m, BlobDataset(256, 6), tc);
  REQUIRE(r.steps.size() == 30);
  for (std::size_t k = 0; k < r.steps.size(); ++k) CHECK(r.steps[k].step == static_cast<Index>(k));
  double first = 0.0, last = 0.0;
  for (std::size_t k = 0; k < 5; ++k) {
    first += r.steps[k].loss;
    last += r.steps[r.steps.size() - 1 - k].loss;
  }
  CHECK(last < first);
}

TEST_CASE("divergence is flagged, not thrown") {
  ModelConfig cfg = named_config("desk-T");
  cfg.norm = NormVariant::Pre;
  cfg.attention = AttentionVariant::Dot;
  Model m(cfg, 7);
  TrainConfig tc;
  tc.steps = 10;
  tc.batch = 4;
  tc.divergence_grad_norm = 1e-3;
  const RunReport r = train(m, BlobDataset(16, 8), tc);
  CHECK(r.diverged);
  CHECK_FALSE(r.divergence.empty());
  CHECK(r.steps.size() < 10);
  CHECK(r.steps.back().flag);
}

TEST_CASE("checkpointed training matches plain training exactly") {
  auto run = [](Index segment) {
    Model m(named_config("desk-T"), 11);
    TrainConfig tc;
    tc.steps = 3;
    tc.batch = 4;
    tc.warmup = 1;
    tc.checkpoint_segment = segment;
    tc.eval_samples = 4;
    train(m, BlobDataset(16, 12), tc);
    return snapshot(m);
  };
  CHECK(run(0) == run(2));
  CHECK(run(0) == run(1));
}

TEST_CASE("checkpointed forward op counts") {
  ModelConfig cfg = named_config("desk-T");
  const Model m(cfg, 13);
  const Tensor images = BlobDataset(2, 14).images(std::vector<Index>{0, 1});
  auto ops = [&](Index segment) {
    Tape tape;
    TapeScope scope(tape);
    reset_stats();
    checkpointed_forward(m, images, segment);
    return stats().forward_ops;
  };
  const auto plain = ops(cfg.total_blocks());
  CHECK(ops(cfg.total_blocks() + 3) == plain);
  CHECK(ops(1) > plain);
  CHECK_THROWS_AS(checkpointed_forward(m, images, 0), ParameterError);
}

TEST_CASE("window transfer") {
  ModelConfig cfg = named_config("desk-T");
  cfg.window = 8;
  const Model src(cfg, 15);
  const Tensor images = BlobDataset(2, 16).images(std::vector<Index>{0, 1});

  SUBCASE("same window keeps logits") {
    const Model same = transfer_window(snapshot(src), cfg, 8);
    NoGradScope no_grad;
    CHECK(same.forward(images).to_vector() == src.forward(images).to_vector());
  }

  SUBCASE("continuous bias keeps shared offsets") {
    const Model big = transfer_window(snapshot(src), cfg, 12, 96);
    const Tensor b8 = src.blocks()[0].bias.bias(8);
    const Tensor b12 = big.blocks()[0].bias.bias(12);
    const Index heads = src.blocks()[0].bias.heads();
    for (Index dy = -7; dy <= 7; ++dy)
      for (Index dx = -7; dx <= 7; ++dx) {
        auto pair = [&](Index m) {
          const Index jy = dy >= 0 ? 0 : m - 1, jx = dx >= 0 ? 0 : m - 1;
          const Index i = (jy + dy) * m + jx + dx, j = jy * m + jx;
          return std::pair{i, j};
        };
        const auto [i8, j8] = pair(8);
        const auto [i12, j12] = pair(12);
        for (Index h = 0; h < heads; ++h) CHECK(b8[(h * 64 + i8) * 64 + j8] == b12[(h * 144 + i12) * 144 + j12]);
      }
  }

  SUBCASE("constant table stays constant") {
    ModelConfig tc = cfg;
    tc.bias = BiasKind::Table;
    Model table_model(tc, 17);
    for (auto& [name, p] : table_model.parameters())
      if (name.ends_with("bias_table"))
        for (double& v : p.mutable_values()) v = 0.3;
    const Model moved = transfer_window(snapshot(table_model), tc, 12, 96);
    const Block& b0 = moved.blocks()[0];
    REQUIRE(b0.bias.param_table()->window == 12);
    const Tensor bias = b0.bias.bias(12);
    for (double v : bias.values()) CHECK(v == doctest::Approx(0.3).epsilon(1e-12));
  }

  CHECK_THROWS_AS(transfer_window(snapshot(src), cfg, 32), GeometryError);
}

TEST_CASE("blob task is nearly linearly separable") {
  // Softmax regression on 4x4 average-pooled pixels, full-batch gradient descent.
  const BlobDataset data(512, 21);
  const Index n = data.size(), side = 16, feat = side * side * 3 + 1, classes = 8;
  std::vector<double> x(static_cast<std::size_t>(n * feat), 0.0);
  std::vector<int> y(static_cast<std::size_t>(n));
  std::vector<double> img(64 * 64 * 3);
  for (Index i = 0; i < n; ++i) {
    data.render(i, img);
    y[static_cast<std::size_t>(i)] = data.label(i);
    for (Index r = 0; r < 64; ++r)
      for (Index c = 0; c < 64; ++c)
        for (Index ch = 0; ch < 3; ++ch) x[i * feat + ((r / 4) * side + c / 4) * 3 + ch] += img[(r * 64 + c) * 3 + ch] / 16.0;
    x[i * feat + feat - 1] = 1.0;
  }
  std::vector<double> w(static_cast<std::size_t>(feat * classes), 0.0), grad(w.size());
  std::vector<double> p(static_cast<std::size_t>(classes));
  auto accuracy = [&] {
    Index correct = 0;
    for (Index i = 0; i < n; ++i) {
      Index best = 0;
      double best_v = -INFINITY;
      for (Index k = 0; k < classes; ++k) {
        double z = 0.0;
        for (Index f = 0; f < feat; ++f) z += x[i * feat + f] * w[f * classes + k];
        if (z > best_v) best_v = z, best = k;
      }
      correct += best == y[static_cast<std::size_t>(i)];
    }
    return static_cast<double>(correct) / static_cast<double>(n);
  };
  for (int epoch = 0; epoch < 300; ++epoch) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (Index i = 0; i < n; ++i) {
      double mx = -INFINITY;
      for (Index k = 0; k < classes; ++k) {
        double z = 0.0;
        for (Index f = 0; f < feat; ++f) z += x[i * feat + f] * w[f * classes + k];
        p[k] = z;
        mx = std::max(mx, z);
      }
      double s = 0.0;
      for (double& v : p) s += (v = std::exp(v - mx));
      for (Index k = 0; k < classes; ++k) {
        const double d = p[k] / s - (k == y[static_cast<std::size_t>(i)] ? 1.0 : 0.0);
        for (Index f = 0; f < feat; ++f) grad[f * classes + k] += d * x[i * feat + f];
      }
    }
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= 0.5 * grad[k] / static_cast<double>(n);
  }
  const double acc = accuracy();
  CAPTURE(acc);
  CHECK(acc >= 0.85);
}
