#pragma once

#include <optional>
#include <random>
#include <vector>

#include "swinlab/position_bias.hpp"
#include "swinlab/tensor.hpp"

namespace swinlab {

enum class AttentionVariant { Dot, Cosine };

std::string to_string(AttentionVariant v);
AttentionVariant parse_attention_variant(const std::string& name);

struct AttentionConfig {
  Index heads = 1;
  Index head_dim = 1;
  AttentionVariant variant = AttentionVariant::Cosine;
  double tau_init = 1.0;
  double tau_min = 0.01;
  /// Evaluate one window at a time instead of all windows in one batch.
  bool sequential = false;
};

struct AttentionWeights {
  Tensor qkv_w;   // [C, 3 * heads * d]
  Tensor qkv_b;   // [3 * heads * d]
  Tensor proj_w;  // [heads * d, C]
  Tensor proj_b;  // [C]
  Tensor tau;     // [heads], raw; used as max(tau, tau_min). Cosine variant only.

  static AttentionWeights make(Index channels, const AttentionConfig& cfg, std::mt19937_64& rng);
  NamedTensors parameters() const;
};

/// Optional capture of intermediate attention tensors, for diagnostics/tests.
struct AttentionTrace {
  Tensor pre_bias_logits;  // [nW, heads, N, N]
  Tensor probs;            // [nW, heads, N, N]
};

/// softmax(Q K^T / sqrt(d) + B + mask) V per head, heads concatenated and
/// projected. x: [nW', N, C]; bias: [heads, N, N] or undefined; mask:
/// [nW, N, N] with nW dividing nW', or undefined.
Tensor attend_dot(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg, const Tensor& bias,
                  const Tensor& mask, AttentionTrace* trace = nullptr);

/// Same as attend_dot with logits cos(q_i, k_j) / max(tau_h, tau_min) + B + mask.
Tensor attend_cosine(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg, const Tensor& bias,
                     const Tensor& mask, AttentionTrace* trace = nullptr);

/// Window-by-window evaluation of either variant; numerically equal to the
/// batch path with a transient footprint of a single window.
Tensor attend_sequential(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg, const Tensor& bias,
                         const Tensor& mask, AttentionTrace* trace = nullptr);

/// Dispatches on cfg.variant and cfg.sequential.
Tensor attend(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg, const Tensor& bias,
              const Tensor& mask, AttentionTrace* trace = nullptr);

struct HeadStats {
  std::vector<double> entropy;   // nats, mean over query rows
  std::vector<double> max_prob;  // mean over query rows
};

/// probs: [heads, N, N] (leading window axes, if any, are averaged too).
HeadStats attention_stats(const Tensor& probs);

/// Runtime check that cosine logits respect the 1/tau bound. Defaults on in
/// debug builds.
void set_debug_checks(bool on);
bool debug_checks();

/// Test hook: overrides the tau floor to simulate a broken clamp.
void inject_tau_floor(std::optional<double> floor);

}  // namespace swinlab
