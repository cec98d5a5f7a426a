#include "swinlab/attention.hpp"

#include <cmath>

#include "swinlab/ops.hpp"

namespace swinlab {

namespace {

#ifdef NDEBUG
thread_local bool g_debug_checks = false;
#else
thread_local bool g_debug_checks = true;
#endif
thread_local std::optional<double> g_tau_floor_override;

double effective_tau_floor(const AttentionConfig& cfg) { return g_tau_floor_override.value_or(cfg.tau_min); }

void check_projection_shapes(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg) {
  if (x.rank() != 3) throw DimensionError("attention expects x as [nW, N, C], got " + to_string(x.shape()));
  const Index c = x.dim(2);
  const Index inner = cfg.heads * cfg.head_dim;
  if (w.qkv_w.shape() != Shape{c, 3 * inner} || w.proj_w.shape() != Shape{inner, c}) {
    throw DimensionError("attention weights " + to_string(w.qkv_w.shape()) + "/" + to_string(w.proj_w.shape()) +
                         " inconsistent with C=" + std::to_string(c) + ", heads*d=" + std::to_string(inner));
  }
}

/// Bound taken from the configured floor, so a broken clamp is caught.
void check_cosine_bound(const Tensor& logits, const Tensor& tau, double tau_min, Index heads, Index n) {
  const auto lv = logits.values();
  const Index per_head = n * n;
  for (Index k = 0; k < logits.numel(); ++k) {
    const Index h = (k / per_head) % heads;
    const double bound = 1.0 / std::max(tau[h], tau_min);
    if (std::abs(lv[k]) > bound * (1.0 + 1e-12)) {
      throw ContractError("cosine logit " + std::to_string(lv[k]) + " exceeds 1/tau = " + std::to_string(bound) +
                          " for head " + std::to_string(h));
    }
  }
}

/// Shared body of both variants over a batch of windows.
Tensor attend_batch(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg, const Tensor& bias,
                    const Tensor& mask, AttentionTrace* trace) {
  check_projection_shapes(x, w, cfg);
  const Index nw = x.dim(0), n = x.dim(1);
  const Index heads = cfg.heads, d = cfg.head_dim;

  const Tensor qkv = permute(reshape(matmul(x, w.qkv_w) + w.qkv_b, {nw, n, 3, heads, d}), {2, 0, 3, 1, 4});
  const Shape head_shape{nw, heads, n, d};
  const Tensor q = reshape(slice0(qkv, 0, 1), head_shape);
  const Tensor k = reshape(slice0(qkv, 1, 1), head_shape);
  const Tensor v = reshape(slice0(qkv, 2, 1), head_shape);

  Tensor logits;
  if (cfg.variant == AttentionVariant::Dot) {
    logits = matmul(q, transpose_last2(k)) * (1.0 / std::sqrt(static_cast<double>(d)));
  } else {
    if (!w.tau.defined() || w.tau.numel() != heads) {
      throw DimensionError("cosine attention needs one tau per head");
    }
    const Tensor cosine = matmul(normalize_lastdim(q), transpose_last2(normalize_lastdim(k)));
    const Tensor inv_tau = reshape(reciprocal(clamp_min(w.tau, effective_tau_floor(cfg))), {heads, 1, 1});
    logits = cosine * inv_tau;
    if (g_debug_checks) check_cosine_bound(logits, w.tau, cfg.tau_min, heads, n);
  }
  if (trace) trace->pre_bias_logits = logits;

  if (bias.defined()) {
    if (bias.shape() != Shape{heads, n, n}) {
      throw DimensionError("bias " + to_string(bias.shape()) + " does not match [heads, N, N] = [" +
                           std::to_string(heads) + "," + std::to_string(n) + "," + std::to_string(n) + "]");
    }
    logits = logits + bias;
  }
  if (mask.defined()) {
    const Index mw = mask.dim(0);
    if (mask.rank() != 3 || mask.dim(1) != n || mask.dim(2) != n || nw % mw != 0) {
      throw DimensionError("mask " + to_string(mask.shape()) + " incompatible with " + std::to_string(nw) +
                           " windows of " + std::to_string(n) + " patches");
    }
    logits = reshape(reshape(logits, {nw / mw, mw, heads, n, n}) + reshape(mask, {mw, 1, n, n}), {nw, heads, n, n});
  }
  const Tensor probs = softmax_lastdim(logits);
  if (trace) trace->probs = probs;

  const Tensor merged = reshape(permute(matmul(probs, v), {0, 2, 1, 3}), {nw, n, heads * d});
  return matmul(merged, w.proj_w) + w.proj_b;
}

}  // namespace

std::string to_string(AttentionVariant v) { return v == AttentionVariant::Dot ? "dot" : "cosine"; }

AttentionVariant parse_attention_variant(const std::string& name) {
  if (name == "dot") return AttentionVariant::Dot;
  if (name == "cosine") return AttentionVariant::Cosine;
  throw ConfigError("unknown attention variant '" + name + "' (expected dot or cosine)");
}

AttentionWeights AttentionWeights::make(Index channels, const AttentionConfig& cfg, std::mt19937_64& rng) {
  const Index inner = cfg.heads * cfg.head_dim;
  AttentionWeights w;
  w.qkv_w = Tensor::zeros({channels, 3 * inner}, true);
  w.qkv_b = Tensor::zeros({3 * inner}, true);
  w.proj_w = Tensor::zeros({inner, channels}, true);
  w.proj_b = Tensor::zeros({channels}, true);
  fill_truncated_normal(w.qkv_w, rng, 0.02);
  fill_truncated_normal(w.proj_w, rng, 0.02);
  if (cfg.variant == AttentionVariant::Cosine) w.tau = Tensor::full({cfg.heads}, cfg.tau_init, true);
  return w;
}

NamedTensors AttentionWeights::parameters() const {
  NamedTensors out{{"qkv.weight", qkv_w}, {"qkv.bias", qkv_b}, {"proj.weight", proj_w}, {"proj.bias", proj_b}};
  if (tau.defined()) out.emplace_back("tau", tau);
  return out;
}

Tensor attend_dot(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg, const Tensor& bias,
                  const Tensor& mask, AttentionTrace* trace) {
  AttentionConfig c = cfg;
  c.variant = AttentionVariant::Dot;
  return attend_batch(x, w, c, bias, mask, trace);
}

Tensor attend_cosine(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg, const Tensor& bias,
                     const Tensor& mask, AttentionTrace* trace) {
  AttentionConfig c = cfg;
  c.variant = AttentionVariant::Cosine;
  return attend_batch(x, w, c, bias, mask, trace);
}

Tensor attend_sequential(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg, const Tensor& bias,
                         const Tensor& mask, AttentionTrace* trace) {
  check_projection_shapes(x, w, cfg);
  const Index nw = x.dim(0);
  const Index mw = mask.defined() ? mask.dim(0) : 1;
  if (mask.defined() && nw % mw != 0) throw DimensionError("mask window count does not divide the batch");
  std::vector<Tensor> outs;
  std::vector<Tensor> logits, probs;
  outs.reserve(static_cast<std::size_t>(nw));
  for (Index i = 0; i < nw; ++i) {
    AttentionTrace local;
    const Tensor m = mask.defined() ? slice0(mask, i % mw, 1) : Tensor();
    outs.push_back(attend_batch(slice0(x, i, 1), w, cfg, bias, m, trace ? &local : nullptr));
    if (trace) {
      logits.push_back(local.pre_bias_logits);
      probs.push_back(local.probs);
    }
  }
  if (trace) {
    trace->pre_bias_logits = concat0(logits);
    trace->probs = concat0(probs);
  }
  return concat0(outs);
}

Tensor attend(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg, const Tensor& bias,
              const Tensor& mask, AttentionTrace* trace) {
  if (cfg.sequential) return attend_sequential(x, w, cfg, bias, mask, trace);
  return attend_batch(x, w, cfg, bias, mask, trace);
}

HeadStats attention_stats(const Tensor& probs) {
  if (probs.rank() < 3) throw DimensionError("attention_stats expects [heads, N, N], got " + to_string(probs.shape()));
  const Index heads = probs.dim(-3), n = probs.dim(-2), m = probs.dim(-1);
  const Index groups = probs.numel() / (heads * n * m);
  const auto pv = probs.values();
  HeadStats s{std::vector<double>(static_cast<std::size_t>(heads), 0.0),
              std::vector<double>(static_cast<std::size_t>(heads), 0.0)};
  for (Index g = 0; g < groups; ++g)
    for (Index h = 0; h < heads; ++h)
      for (Index i = 0; i < n; ++i) {
        const double* row = pv.data() + ((g * heads + h) * n + i) * m;
        double sum = 0.0, ent = 0.0, mx = 0.0;
        for (Index j = 0; j < m; ++j) {
          sum += row[j];
          if (row[j] < 0.0) throw ContractError("attention probabilities must be nonnegative");
          if (row[j] > 0.0) ent -= row[j] * std::log(row[j]);
          mx = std::max(mx, row[j]);
        }
        if (std::abs(sum - 1.0) > 1e-6) {
          throw ContractError("attention row sums to " + std::to_string(sum) + ", expected 1 within 1e-6");
        }
        s.entropy[h] += ent;
        s.max_prob[h] += mx;
      }
  const double inv = 1.0 / static_cast<double>(groups * n);
  for (Index h = 0; h < heads; ++h) {
    s.entropy[h] *= inv;
    s.max_prob[h] *= inv;
  }
  return s;
}

void set_debug_checks(bool on) { g_debug_checks = on; }
bool debug_checks() { return g_debug_checks; }
void inject_tau_floor(std::optional<double> floor) { g_tau_floor_override = floor; }

}  // namespace swinlab
