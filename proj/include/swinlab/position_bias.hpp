#pragma once

#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "swinlab/tensor.hpp"
#include "swinlab/window.hpp"

namespace swinlab {

enum class Spacing { Linear, Log };

/// How continuous-bias inputs are scaled. TrainWindow maps the training
/// window's largest offset to +-1; None feeds raw (or raw log) offsets.
enum class CoordNormalization { None, TrainWindow };

/// Ghost samples used by the bicubic resampler outside the table.
enum class BicubicBorder { LinearExtrapolate, Replicate };

enum class BiasKind { Table, LinearCPB, LogCPB };

std::string to_string(BiasKind kind);
BiasKind parse_bias_kind(const std::string& name);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Directly learned (2M-1)^2 x heads bias table.
struct ParamTable {
  Index window = 0;
  Index heads = 0;
  Tensor table;  // [(2M-1)^2, heads]; row = (dy + M - 1) * (2M - 1) + (dx + M - 1)
};

ParamTable make_param_table(Index window, Index heads, std::mt19937_64& rng);

/// Gathers B[h, i, j] = table[idx(i, j), h]. Differentiable w.r.t. the table.
Tensor param_bias(const ParamTable& table, const RelIndex& idx);

/// Resamples the table to a new window with a Catmull-Rom (a = -0.5) kernel
/// on a corner-aligned grid, each head independently.
ParamTable bicubic_transfer(const ParamTable& table, Index new_window,
                            BicubicBorder border = BicubicBorder::LinearExtrapolate);

/// Raw coordinate transform of a single offset: identity or sign(d)*log(1+|d|).
double coordinate_transform(double delta, Spacing spacing);

/// [(2*target-1)^2, 2] relative coordinates (dx, dy), rows in table order.
Tensor rel_coords(Index train_window, Index target_window, Spacing spacing,
                  CoordNormalization normalization = CoordNormalization::TrainWindow);

/// Share of the target coordinate range that lies beyond the training range:
/// (range_target - range_train) / range_train. Zero when target <= train.
double extrapolation_ratio(Index train_window, Index target_window, Spacing spacing);

/// Two-layer ReLU MLP mapping a relative coordinate pair to one bias per head.
struct CPBNet {
  Index hidden = 0;
  Index heads = 0;
  Spacing spacing = Spacing::Log;
  CoordNormalization normalization = CoordNormalization::TrainWindow;
  Tensor w1;  // [2, hidden]
  Tensor b1;  // [hidden]
  Tensor w2;  // [hidden, heads]
  Tensor b2;  // [heads]
};

CPBNet make_cpb_net(Index heads, Index hidden, Spacing spacing, std::mt19937_64& rng,
                    CoordNormalization normalization = CoordNormalization::TrainWindow);

/// Network evaluated on every offset of the target window: [(2*target-1)^2, heads].
Tensor cpb_table(const CPBNet& net, Index train_window, Index target_window);

/// [heads, M^2, M^2] bias for the target window, differentiable w.r.t. the net.
Tensor cpb_bias(const CPBNet& net, Index train_window, Index target_window, Index heads);

/// Freezes the network output for one window into a plain table.
ParamTable precompute_bias(const CPBNet& net, Index train_window, Index window);

/// One of the three bias regimes behind a single interface.
class BiasProvider {
 public:
  static BiasProvider table(Index window, Index heads, std::mt19937_64& rng);
  static BiasProvider cpb(BiasKind kind, Index train_window, Index heads, Index hidden, std::mt19937_64& rng,
                          CoordNormalization normalization = CoordNormalization::TrainWindow);

  BiasKind kind() const { return kind_; }
  Index heads() const { return heads_; }
  Index train_window() const { return train_window_; }

  /// [heads, M^2, M^2] for the given window.
  Tensor bias(Index window) const;

  /// Parameters with names relative to the owner ("bias_table", "cpb.w1", ...).
  NamedTensors parameters() const;

  const std::optional<ParamTable>& param_table() const { return table_; }
  const std::optional<CPBNet>& cpb_net() const { return net_; }
  ParamTable& mutable_table() { return *table_; }

  /// Replaces a table provider's table (window transfer).
  void reset_table(ParamTable table);

 private:
  BiasKind kind_ = BiasKind::LogCPB;
  Index heads_ = 0;
  Index train_window_ = 0;
  std::optional<ParamTable> table_;
  std::optional<CPBNet> net_;
};

/// Samples from N(0, std^2) truncated to +-2 std.
double truncated_normal(std::mt19937_64& rng, double std);
void fill_truncated_normal(Tensor& t, std::mt19937_64& rng, double std);
void fill_uniform(Tensor& t, std::mt19937_64& rng, double bound);

}  // namespace swinlab
