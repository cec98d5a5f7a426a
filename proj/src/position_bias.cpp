#include "swinlab/position_bias.hpp"

#include <array>
#include <cmath>

#include "swinlab/ops.hpp"

namespace swinlab {

std::string to_string(BiasKind kind) {
  switch (kind) {
    case BiasKind::Table:
      return "table";
    case BiasKind::LinearCPB:
      return "lin_cpb";
    case BiasKind::LogCPB:
      return "log_cpb";
  }
  return "?";
}

BiasKind parse_bias_kind(const std::string& name) {
  if (name == "table") return BiasKind::Table;
  if (name == "lin_cpb") return BiasKind::LinearCPB;
  if (name == "log_cpb") return BiasKind::LogCPB;
  throw ConfigError("unknown bias kind '" + name + "' (expected table, lin_cpb or log_cpb)");
}

double truncated_normal(std::mt19937_64& rng, double std) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (;;) {
    const double z = dist(rng);
    if (z >= -2.0 && z <= 2.0) return z * std;
  }
}

void fill_truncated_normal(Tensor& t, std::mt19937_64& rng, double std) {
  for (double& v : t.mutable_values()) v = truncated_normal(rng, std);
}

void fill_uniform(Tensor& t, std::mt19937_64& rng, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.mutable_values()) v = dist(rng);
}

// --- parameterized table ---------------------------------------------------

ParamTable make_param_table(Index window, Index heads, std::mt19937_64& rng) {
  if (window < 1 || heads < 1) throw ParameterError("param table needs window >= 1 and heads >= 1");
  const Index side = 2 * window - 1;
  Tensor t = Tensor::zeros({side * side, heads}, true);
  fill_truncated_normal(t, rng, 0.02);
  return ParamTable{window, heads, t};
}

Tensor param_bias(const ParamTable& table, const RelIndex& idx) {
  if (table.window != idx.window) {
    throw ParameterError("bias table built for M=" + std::to_string(table.window) + " used with M=" +
                         std::to_string(idx.window));
  }
  const Index n = idx.patches();
  const Index heads = table.heads;
  std::vector<Index> flat(static_cast<std::size_t>(heads * n * n));
  std::size_t k = 0;
  for (Index h = 0; h < heads; ++h)
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) flat[k++] = idx.at(i, j) * heads + h;
  return gather(table.table, make_index_map(std::move(flat)), Shape{heads, n, n});
}

namespace {

double cubic_weight(double d) {
  constexpr double a = -0.5;
  d = std::abs(d);
  if (d <= 1.0) return ((a + 2.0) * d - (a + 3.0)) * d * d + 1.0;
  if (d < 2.0) return ((a * d - 5.0 * a) * d + 8.0 * a) * d - 4.0 * a;
  return 0.0;
}

/// Resamples a 1-D sequence of `n` samples (stride `stride`) onto `m` points.
void resample_line(const double* src, Index n, Index stride, double* dst, Index m, Index dst_stride,
                   BicubicBorder border) {
  auto sample = [&](Index i) -> double {
    if (i >= 0 && i < n) return src[i * stride];
    if (border == BicubicBorder::Replicate || n == 1) return src[(i < 0 ? 0 : n - 1) * stride];
    if (i < 0) return src[0] + static_cast<double>(i) * (src[stride] - src[0]);
    const double last = src[(n - 1) * stride];
    return last + static_cast<double>(i - (n - 1)) * (last - src[(n - 2) * stride]);
  };
  for (Index t = 0; t < m; ++t) {
    const double u = m == 1 ? 0.0 : static_cast<double>(t * (n - 1)) / static_cast<double>(m - 1);
    const Index i0 = static_cast<Index>(std::floor(u));
    const double f = u - static_cast<double>(i0);
    double acc = 0.0;
    for (Index o = -1; o <= 2; ++o) acc += cubic_weight(f - static_cast<double>(o)) * sample(i0 + o);
    dst[t * dst_stride] = acc;
  }
}

}  // namespace

ParamTable bicubic_transfer(const ParamTable& table, Index new_window, BicubicBorder border) {
  if (table.window < 2) throw ParameterError("bicubic_transfer needs a source window >= 2");
  if (new_window < 2) throw ParameterError("bicubic_transfer needs a target window >= 2, got " + std::to_string(new_window));
  const Index s = 2 * table.window - 1;
  const Index t = 2 * new_window - 1;
  const Index heads = table.heads;
  const auto src = table.table.values();
  // Columns first (dx), then rows (dy); layout [row, col, head].
  std::vector<double> tmp(static_cast<std::size_t>(s * t * heads));
  for (Index r = 0; r < s; ++r)
    for (Index h = 0; h < heads; ++h)
      resample_line(src.data() + r * s * heads + h, s, heads, tmp.data() + r * t * heads + h, t, heads, border);
  Buffer out(static_cast<std::size_t>(t * t * heads));
  for (Index c = 0; c < t; ++c)
    for (Index h = 0; h < heads; ++h)
      resample_line(tmp.data() + c * heads + h, s, t * heads, out.data() + c * heads + h, t, t * heads, border);
  return ParamTable{new_window, heads, Tensor(Shape{t * t, heads}, std::move(out), true)};
}

// --- continuous position bias ----------------------------------------------

double coordinate_transform(double delta, Spacing spacing) {
  if (spacing == Spacing::Linear) return delta;
  const double mag = std::log1p(std::abs(delta));
  return delta > 0 ? mag : (delta < 0 ? -mag : 0.0);
}

Tensor rel_coords(Index train_window, Index target_window, Spacing spacing, CoordNormalization normalization) {
  if (train_window < 1 || target_window < 1) throw ParameterError("rel_coords needs windows >= 1");
  double divisor = 1.0;
  if (normalization == CoordNormalization::TrainWindow) {
    if (train_window == 1) throw ParameterError("rel_coords: training window 1 gives a zero normalization divisor");
    divisor = coordinate_transform(static_cast<double>(train_window - 1), spacing);
  }
  const Index side = 2 * target_window - 1;
  Buffer v(static_cast<std::size_t>(side * side * 2));
  for (Index r = 0; r < side; ++r)
    for (Index c = 0; c < side; ++c) {
      const double dy = static_cast<double>(r - (target_window - 1));
      const double dx = static_cast<double>(c - (target_window - 1));
      v[static_cast<std::size_t>((r * side + c) * 2)] = coordinate_transform(dx, spacing) / divisor;
      v[static_cast<std::size_t>((r * side + c) * 2 + 1)] = coordinate_transform(dy, spacing) / divisor;
    }
  return Tensor(Shape{side * side, 2}, std::move(v));
}

double extrapolation_ratio(Index train_window, Index target_window, Spacing spacing) {
  if (train_window < 2) throw ParameterError("extrapolation_ratio needs a training window >= 2");
  if (target_window <= train_window) return 0.0;
  const double train_range = coordinate_transform(static_cast<double>(train_window - 1), spacing);
  const double target_range = coordinate_transform(static_cast<double>(target_window - 1), spacing);
  return (target_range - train_range) / train_range;
}

CPBNet make_cpb_net(Index heads, Index hidden, Spacing spacing, std::mt19937_64& rng,
                    CoordNormalization normalization) {
  if (heads < 1 || hidden < 1) throw ParameterError("CPB net needs heads >= 1 and hidden >= 1");
  CPBNet net;
  net.hidden = hidden;
  net.heads = heads;
  net.spacing = spacing;
  net.normalization = normalization;
  net.w1 = Tensor::zeros({2, hidden}, true);
  net.b1 = Tensor::zeros({hidden}, true);
  net.w2 = Tensor::zeros({hidden, heads}, true);
  net.b2 = Tensor::zeros({heads}, true);
  fill_uniform(net.w1, rng, std::sqrt(6.0 / 2.0));
  fill_uniform(net.w2, rng, std::sqrt(6.0 / static_cast<double>(hidden)));
  return net;
}

Tensor cpb_table(const CPBNet& net, Index train_window, Index target_window) {
  const Tensor coords = rel_coords(train_window, target_window, net.spacing, net.normalization);
  const Tensor hidden = relu(matmul_rowwise(coords, net.w1) + net.b1);
  return matmul_rowwise(hidden, net.w2) + net.b2;
}

Tensor cpb_bias(const CPBNet& net, Index train_window, Index target_window, Index heads) {
  if (net.heads != heads || net.w2.dim(1) != heads) {
    throw ParameterError("CPB net emits " + std::to_string(net.w2.dim(1)) + " heads, attention expects " +
                         std::to_string(heads));
  }
  ParamTable view{target_window, heads, cpb_table(net, train_window, target_window)};
  return param_bias(view, relative_index(target_window));
}

ParamTable precompute_bias(const CPBNet& net, Index train_window, Index window) {
  NoGradScope no_grad;
  const Tensor t = cpb_table(net, train_window, window);
  return ParamTable{window, net.heads, Tensor(t.shape(), Buffer(t.values().begin(), t.values().end()), true)};
}

// --- provider ---------------------------------------------------------------

BiasProvider BiasProvider::table(Index window, Index heads, std::mt19937_64& rng) {
  BiasProvider p;
  p.kind_ = BiasKind::Table;
  p.heads_ = heads;
  p.train_window_ = window;
  p.table_ = make_param_table(window, heads, rng);
  return p;
}

BiasProvider BiasProvider::cpb(BiasKind kind, Index train_window, Index heads, Index hidden, std::mt19937_64& rng,
                               CoordNormalization normalization) {
  if (kind == BiasKind::Table) throw ParameterError("BiasProvider::cpb called with the table kind");
  BiasProvider p;
  p.kind_ = kind;
  p.heads_ = heads;
  p.train_window_ = train_window;
  p.net_ = make_cpb_net(heads, hidden, kind == BiasKind::LogCPB ? Spacing::Log : Spacing::Linear, rng, normalization);
  return p;
}

Tensor BiasProvider::bias(Index window) const {
  if (table_) return param_bias(*table_, relative_index(window));
  return cpb_bias(*net_, train_window_, window, heads_);
}

NamedTensors BiasProvider::parameters() const {
  if (table_) return {{"bias_table", table_->table}};
  return {{"cpb.w1", net_->w1}, {"cpb.b1", net_->b1}, {"cpb.w2", net_->w2}, {"cpb.b2", net_->b2}};
}

void BiasProvider::reset_table(ParamTable table) {
  if (!table_) throw UsageError("reset_table on a continuous bias provider");
  if (table.heads != heads_) throw ParameterError("replacement table has the wrong head count");
  table_ = std::move(table);
}

}  // namespace swinlab
