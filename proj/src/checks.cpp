#include "swinlab/checks.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "swinlab/attention.hpp"
#include "swinlab/dataset.hpp"
#include "swinlab/model.hpp"
#include "swinlab/ops.hpp"
#include "swinlab/training.hpp"

namespace swinlab {

GradCheck finite_difference_check(const std::function<Tensor()>& loss, const NamedTensors& params, double tol,
                                  Index samples, double step, std::uint64_t seed) {
  for (const auto& [name, p] : params) {
    Tensor t = p;
    t.zero_grad();
  }
  {
    Tape tape;
    Tensor l;
    {
      TapeScope scope(tape);
      l = loss();
    }
    tape.backward(l);
  }
  auto eval = [&] {
    NoGradScope no_grad;
    return loss().item();
  };
  GradCheck out;
  std::mt19937_64 rng(seed);
  for (const auto& [name, p] : params) {
    Tensor t = p;
    const std::vector<double> analytic = t.grad().to_vector();
    std::vector<Index> picks(static_cast<std::size_t>(t.numel()));
    std::iota(picks.begin(), picks.end(), 0);
    if (samples > 0 && samples < t.numel()) {
      std::shuffle(picks.begin(), picks.end(), rng);
      picks.resize(static_cast<std::size_t>(samples));
    }
    auto v = t.mutable_values();
    for (Index k : picks) {
      const double orig = v[k];
      v[k] = orig + step;
      const double up = eval();
      v[k] = orig - step;
      const double down = eval();
      v[k] = orig;
      const double fd = (up - down) / (2.0 * step);
      const double a = analytic[static_cast<std::size_t>(k)];
      const double err = std::abs(fd - a) / std::max(std::abs(fd) + std::abs(a), 1e-4);
      if (err > out.worst) {
        out.worst = err;
        out.worst_at = name + "[" + std::to_string(k) + "]";
      }
    }
    t.zero_grad();
  }
  out.passed = out.worst <= tol;
  return out;
}

namespace {

std::string fmt(double x) {
  std::ostringstream s;
  s.precision(6);
  s << x;
  return s.str();
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0, bool requires_grad = false) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  std::normal_distribution<double> dist(0.0, scale);
  for (double& v : t.mutable_values()) v = dist(rng);
  return t;
}

CheckResult check_extrapolation_ratio() {
  const double lin = extrapolation_ratio(8, 16, Spacing::Linear);
  const double log = extrapolation_ratio(8, 16, Spacing::Log);
  const bool ok = std::abs(lin - 8.0 / 7.0) < 1e-12 && std::abs(log - (std::log(16.0) - std::log(8.0)) / std::log(8.0)) < 1e-12;
  return {"extrapolation-ratio", ok, "linear=" + fmt(lin) + " log=" + fmt(log)};
}

CheckResult check_log_coords() {
  const Tensor c = rel_coords(8, 8, Spacing::Log, CoordNormalization::None);
  const Tensor c16 = rel_coords(16, 16, Spacing::Log, CoordNormalization::None);
  const auto hi8 = *std::max_element(c.values().begin(), c.values().end());
  const auto lo8 = *std::min_element(c.values().begin(), c.values().end());
  const auto hi16 = *std::max_element(c16.values().begin(), c16.values().end());
  const bool ok = std::abs(hi8 - 2.0794) < 5e-4 && std::abs(lo8 + 2.0794) < 5e-4 && std::abs(hi16 - 2.7726) < 5e-4;
  return {"log-coords", ok, "range8=[" + fmt(lo8) + "," + fmt(hi8) + "] range16 max=" + fmt(hi16)};
}

CheckResult check_param_count() {
  struct Target {
    const char* name;
    double expected;
    double tol;
  };
  const Target targets[] = {{"B", 88e6, 0.03}, {"L", 197e6, 0.03}, {"G", 3.0e9, 0.05}};
  bool ok = true;
  std::string detail;
  for (const auto& t : targets) {
    const double n = static_cast<double>(count_params(named_config(t.name)));
    const double rel = std::abs(n - t.expected) / t.expected;
    ok = ok && rel <= t.tol;
    detail += std::string(t.name) + "=" + fmt(n) + " ";
  }
  std::vector<ModelConfig> small;
  small.push_back(named_config("desk-T"));
  for (auto bias : {BiasKind::Table, BiasKind::LinearCPB}) {
    ModelConfig c = named_config("desk-T");
    c.bias = bias;
    small.push_back(c);
  }
  {
    ModelConfig c = named_config("desk-T");
    c.norm = NormVariant::Sandwich;
    c.attention = AttentionVariant::Dot;
    c.extra_ln_period = 2;
    small.push_back(c);
  }
  for (const auto& c : small) {
    const Model m(c, 0);
    if (m.parameter_count() != count_params(c)) {
      ok = false;
      detail += "enumeration mismatch for " + to_string(c.norm) + "/" + to_string(c.bias) + " ";
    }
  }
  return {"param-count", ok, detail};
}

CheckResult check_cosine_bound(const CheckOptions& opts) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> log_tau(std::log(1e-4), std::log(2.0));
  AttentionConfig cfg;
  cfg.heads = 2;
  cfg.head_dim = 4;
  cfg.variant = AttentionVariant::Cosine;
  const Index c = cfg.heads * cfg.head_dim, n = 9;
  inject_tau_floor(opts.injected_tau_floor);
  bool ok = true;
  std::string detail;
  try {
    for (int trial = 0; trial < 100 && ok; ++trial) {
      AttentionWeights w = AttentionWeights::make(c, cfg, rng);
      fill_truncated_normal(w.qkv_w, rng, 1.0);
      for (double& t : w.tau.mutable_values()) t = std::exp(log_tau(rng));
      const Tensor x = random_tensor({3, n, c}, rng, 3.0);
      AttentionTrace trace;
      attend(x, w, cfg, Tensor(), Tensor(), &trace);
      const auto lv = trace.pre_bias_logits.values();
      for (Index k = 0; k < trace.pre_bias_logits.numel(); ++k) {
        const Index h = (k / (n * n)) % cfg.heads;
        const double bound = 1.0 / std::max(w.tau[h], 0.01);
        if (std::abs(lv[k]) > bound * (1.0 + 1e-12)) {
          ok = false;
          detail = "trial " + std::to_string(trial) + " logit " + fmt(lv[k]) + " exceeds 1/tau " + fmt(bound);
          break;
        }
      }
    }
  } catch (const ContractError& e) {
    ok = false;
    detail = e.what();
  }
  inject_tau_floor(std::nullopt);
  if (!ok) return {"cosine-bound", false, detail};

  // Scaling the q and k projections leaves cosine attention unchanged.
  AttentionWeights w = AttentionWeights::make(c, cfg, rng);
  fill_truncated_normal(w.qkv_w, rng, 1.0);
  fill_truncated_normal(w.qkv_b, rng, 0.5);
  const Tensor x = random_tensor({2, n, c}, rng);
  AttentionTrace base, scaled;
  attend(x, w, cfg, Tensor(), Tensor(), &base);
  AttentionWeights w10 = w;
  w10.qkv_w = w.qkv_w.detach();
  w10.qkv_b = w.qkv_b.detach();
  auto sw = w10.qkv_w.mutable_values();
  auto sb = w10.qkv_b.mutable_values();
  for (Index r = 0; r < c; ++r)
    for (Index col = 0; col < 2 * c; ++col) sw[r * 3 * c + col] *= 10.0;
  for (Index col = 0; col < 2 * c; ++col) sb[col] *= 10.0;
  attend(x, w10, cfg, Tensor(), Tensor(), &scaled);
  double worst = 0.0;
  for (Index k = 0; k < base.probs.numel(); ++k) worst = std::max(worst, std::abs(base.probs[k] - scaled.probs[k]));
  return {"cosine-bound", worst <= 1e-9, "100 fuzzed forwards in bound, scale-invariance max diff " + fmt(worst)};
}

CheckResult check_sequential_batch() {
  std::mt19937_64 rng(5);
  double worst = 0.0;
  for (auto variant : {AttentionVariant::Dot, AttentionVariant::Cosine}) {
    AttentionConfig cfg;
    cfg.heads = 2;
    cfg.head_dim = 4;
    cfg.variant = variant;
    const AttentionWeights w = AttentionWeights::make(8, cfg, rng);
    const Tensor x = random_tensor({8, 16, 8}, rng);
    const Tensor bias = random_tensor({2, 16, 16}, rng, 0.1);
    const Tensor mask = shift_attention_mask(8, 8, 4, 2);
    const Tensor a = attend(x, w, cfg, bias, mask);
    cfg.sequential = true;
    const Tensor b = attend(x, w, cfg, bias, mask);
    for (Index k = 0; k < a.numel(); ++k) worst = std::max(worst, std::abs(a[k] - b[k]));
  }
  ModelConfig mc = named_config("desk-T");
  const BlobDataset data(4, 3);
  const std::vector<Index> ids{0, 1, 2, 3};
  const Tensor images = data.images(ids);
  NoGradScope no_grad;
  const Tensor plain = Model(mc, 9).forward(images);
  mc.sequential_stages = 4;
  const Tensor seq = Model(mc, 9).forward(images);
  for (Index k = 0; k < plain.numel(); ++k) worst = std::max(worst, std::abs(plain[k] - seq[k]));
  return {"sequential-batch", worst <= 1e-9, "max diff " + fmt(worst)};
}

CheckResult check_checkpointing() {
  const ModelConfig cfg = named_config("desk-T");
  const BlobDataset data(4, 3);
  const std::vector<Index> ids{0, 1, 2, 3};
  const Tensor images = data.images(ids);
  const std::vector<int> labels = data.labels(ids);

  auto grads_of = [&](Index segment) {
    Model m(cfg, 4);
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = cross_entropy(m.forward(images, {segment, nullptr}), labels);
    }
    tape.backward(loss);
    std::vector<double> g{loss.item()};
    for (const auto& [name, p] : m.parameters()) {
      const auto v = p.grad().to_vector();
      g.insert(g.end(), v.begin(), v.end());
    }
    return g;
  };
  const bool same = grads_of(0) == grads_of(1);

  // Live-node peak at depth 8 with two-block segments.
  ModelConfig deep = cfg;
  deep.depths = {1, 1, 5, 1};
  auto peak_of = [&](Index segment) {
    Model m(deep, 4);
    reset_stats();
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = cross_entropy(m.forward(images, {segment, nullptr}), labels);
    }
    const std::int64_t peak = stats().peak_live_nodes;
    tape.backward(loss);
    return std::pair{peak, stats().forward_ops};
  };
  const auto [plain_peak, plain_ops] = peak_of(0);
  const auto [seg_peak, seg_ops] = peak_of(2);
  const bool ok = same && seg_peak < plain_peak && seg_ops > plain_ops;
  return {"checkpointing", ok,
          std::string(same ? "gradients identical" : "gradients differ") + ", peak nodes " +
              std::to_string(plain_peak) + " -> " + std::to_string(seg_peak) + ", forward ops " +
              std::to_string(plain_ops) + " -> " + std::to_string(seg_ops)};
}

CheckResult check_gradients() {
  std::mt19937_64 rng(3);
  std::string detail;
  bool ok = true;
  auto record = [&](const std::string& what, const GradCheck& g, double tol) {
    if (g.worst > tol) ok = false;
    if (g.worst > tol || what == "model") detail += what + " worst " + fmt(g.worst) + " at " + g.worst_at + "; ";
  };
  const Tensor a = random_tensor({3, 4}, rng, 1.0, true);
  const Tensor b = random_tensor({4, 5}, rng, 1.0, true);
  const Tensor g = random_tensor({5}, rng, 1.0, true);
  const Tensor be = random_tensor({5}, rng, 1.0, true);
  const Tensor w = random_tensor({3, 5}, rng);
  const NamedTensors ab{{"a", a}, {"b", b}};
  const std::vector<std::pair<std::string, std::function<Tensor()>>> ops = {
      {"matmul", [&] { return reduce_sum(matmul(a, b) * w); }},
      {"layer_norm", [&] { return reduce_sum(layer_norm(matmul(a, b), g, be) * w); }},
      {"softmax", [&] { return reduce_sum(softmax_lastdim(matmul(a, b)) * w); }},
      {"gelu", [&] { return reduce_sum(gelu(matmul(a, b)) * w); }},
      {"normalize", [&] { return reduce_sum(normalize_lastdim(matmul(a, b)) * w); }},
      {"reciprocal", [&] { return reduce_sum(reciprocal(clamp_min(matmul(a, b) * matmul(a, b), 0.5)) * w); }},
      {"permute", [&] { return reduce_sum(permute(reshape(matmul(a, b), {3, 5, 1}), {2, 1, 0}) * reshape(w, {1, 5, 3})); }},
      {"mean_dim", [&] { return reduce_sum(mean_dim(reshape(matmul(a, b), {3, 5, 1}), 1) * slice0(w, 0, 3)); }},
  };
  for (const auto& [name, fn] : ops) {
    NamedTensors params = ab;
    if (name == "layer_norm") {
      params.emplace_back("gamma", g);
      params.emplace_back("beta", be);
    }
    record(name, finite_difference_check(fn, params, 1e-4), 1e-4);
  }
  {
    const std::vector<int> labels{0, 3, 4};
    const Tensor logits = random_tensor({3, 5}, rng, 1.0, true);
    record("cross_entropy", finite_difference_check([&] { return cross_entropy(logits, labels); }, {{"x", logits}}, 1e-4),
           1e-4);
  }
  {
    // Full model; res-post gains raised so every branch carries gradient.
    ModelConfig cfg = named_config("desk-T");
    cfg.image_size = 32;
    cfg.res_post_gain = 0.5;
    Model m(cfg, 2);
    for (auto& [name, p] : m.parameters()) {
      if (name.ends_with("cpb.b1")) {
        Tensor t = p;
        fill_uniform(t, rng, 0.5);
      }
    }
    BlobTaskConfig task;
    task.image_size = 32;
    task.radius = 6.0;
    task.jitter = 2.0;
    task.sigma = 2.0;
    const BlobDataset data(3, 7, task);
    const std::vector<Index> ids{0, 1, 2};
    const Tensor images = data.images(ids);
    const std::vector<int> labels = data.labels(ids);
    record("model",
           finite_difference_check([&] { return cross_entropy(m.forward(images), labels); }, m.parameters(), 1e-3, 4),
           1e-3);
  }
  return {"gradients", ok, detail};
}

CheckResult check_cpb_precompute() {
  std::mt19937_64 rng(8);
  bool ok = true;
  for (Index window : {2, 7, 8}) {
    for (auto spacing : {Spacing::Linear, Spacing::Log}) {
      CPBNet net = make_cpb_net(3, 16, spacing, rng);
      fill_uniform(net.b1, rng, 0.5);
      const ParamTable frozen = precompute_bias(net, window, window);
      NoGradScope no_grad;
      const Tensor live = cpb_bias(net, window, window, 3);
      const Tensor stored = param_bias(frozen, relative_index(window));
      ok = ok && live.to_vector() == stored.to_vector();
    }
  }
  return {"cpb-precompute", ok, ok ? "bit-identical for M in {2,7,8}" : "precomputed table differs"};
}

CheckResult check_identity_collapse() {
  std::mt19937_64 rng(1);
  bool ok = true;
  const Tensor x = random_tensor({2, 64, 32}, rng);
  double worst = 0.0;
  for (auto nv : {NormVariant::Pre, NormVariant::ResPost, NormVariant::Sandwich, NormVariant::Post}) {
    BlockConfig bc;
    bc.norm = nv;
    bc.attention.heads = 1;
    bc.attention.head_dim = 32;
    bc.res_post_gain = 1.0;
    bc.resolution = 8;
    bc.window = 4;
    bc.shift = 2;
    Block blk = Block::make(bc, 32, BiasProvider::table(4, 1, rng), rng);
    for (Tensor* t : {&blk.attn.proj_w, &blk.attn.proj_b, &blk.fc2.weight, &blk.fc2.bias}) {
      std::fill(t->mutable_values().begin(), t->mutable_values().end(), 0.0);
    }
    NoGradScope no_grad;
    // Post-norm is the identity only on LayerNorm fixed points: rows with
    // zero mean and variance 1 - eps.
    Tensor in = x;
    if (nv == NormVariant::Post) {
      in = x.detach();
      auto v = in.mutable_values();
      for (Index r = 0; r < in.numel() / 32; ++r) {
        double* row = v.data() + r * 32;
        double mean = 0.0, var = 0.0;
        for (Index k = 0; k < 32; ++k) mean += row[k] / 32.0;
        for (Index k = 0; k < 32; ++k) var += (row[k] - mean) * (row[k] - mean) / 32.0;
        const double f = std::sqrt((1.0 - 1e-5) / var);
        for (Index k = 0; k < 32; ++k) row[k] = (row[k] - mean) * f;
      }
    }
    const Tensor out = block_forward(in, blk);
    const double tol = nv == NormVariant::Post ? 1e-12 : 0.0;
    for (Index k = 0; k < out.numel(); ++k) {
      const double dev = std::abs(out[k] - in[k]);
      worst = std::max(worst, dev);
      ok = ok && dev <= tol;
    }
  }
  return {"identity-collapse", ok, "max deviation " + fmt(worst)};
}

using CheckFn = std::function<CheckResult(const CheckOptions&)>;

const std::vector<std::pair<std::string, CheckFn>>& registry() {
  static const std::vector<std::pair<std::string, CheckFn>> r = {
      {"extrapolation-ratio", [](const CheckOptions&) { return check_extrapolation_ratio(); }},
      {"log-coords", [](const CheckOptions&) { return check_log_coords(); }},
      {"param-count", [](const CheckOptions&) { return check_param_count(); }},
      {"cosine-bound", check_cosine_bound},
      {"sequential-batch", [](const CheckOptions&) { return check_sequential_batch(); }},
      {"checkpointing", [](const CheckOptions&) { return check_checkpointing(); }},
      {"gradients", [](const CheckOptions&) { return check_gradients(); }},
      {"cpb-precompute", [](const CheckOptions&) { return check_cpb_precompute(); }},
      {"identity-collapse", [](const CheckOptions&) { return check_identity_collapse(); }},
  };
  return r;
}

}  // namespace

std::vector<std::string> check_names() {
  std::vector<std::string> names;
  for (const auto& [name, fn] : registry()) names.push_back(name);
  return names;
}

std::vector<CheckResult> run_checks(const std::vector<std::string>& only, const CheckOptions& opts) {
  for (const auto& name : only) {
    const auto& r = registry();
    if (std::none_of(r.begin(), r.end(), [&](const auto& e) { return e.first == name; })) {
      throw ConfigError("unknown check '" + name + "'");
    }
  }
  std::vector<CheckResult> out;
  for (const auto& [name, fn] : registry()) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    try {
      out.push_back(fn(opts));
    } catch (const Error& e) {
      out.push_back({name, false, std::string("error: ") + e.what()});
    }
  }
  return out;
}

}  // namespace swinlab
