#include "swinlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace swinlab {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using MatMap = Eigen::Map<RowMatrix>;

using Node = detail::Node;
using NodePtr = std::shared_ptr<Node>;

void check_finite(const char* op, const Buffer& v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(op, "element " + std::to_string(i) + " is " + std::to_string(v[i]));
    }
  }
}

/// Wraps a computed buffer as an op result; records it for backward when any
/// input needs a gradient and a tape is active.
Tensor make_op(const char* op, Shape shape, Buffer value, std::vector<Tensor> inputs,
               std::function<void(Node&)> backward_fn, bool always_record = false) {
  check_finite(op, value);
  stats().forward_ops += 1;
  auto node = std::make_shared<Node>(std::move(shape), std::move(value));
  node->op = op;
  Tape* tape = active_tape();
  bool needs = always_record;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (tape != nullptr && needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward_fn = std::move(backward_fn);
    tape->record(node);
  }
  return Tensor(std::move(node));
}

Node& in(Node& self, std::size_t i) { return *self.inputs[i]; }

std::vector<Index> strides_of(const Shape& s) {
  std::vector<Index> st(s.size(), 1);
  for (Index i = static_cast<Index>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

/// Maps an output flat index to the flat index of a broadcast input.
class BroadcastMap {
 public:
  BroadcastMap(const Shape& in_shape, const Shape& out_shape) {
    const Index n_in = shape_numel(in_shape);
    if (in_shape == out_shape) {
      mode_ = Mode::Identity;
      return;
    }
    if (n_in == 1) {
      mode_ = Mode::Scalar;
      return;
    }
    // Suffix case: input equals the trailing extents of the output.
    const std::size_t r_in = in_shape.size(), r_out = out_shape.size();
    std::size_t lead = 0;
    while (lead < r_in && in_shape[lead] == 1) ++lead;
    bool suffix = (r_in - lead) <= r_out;
    for (std::size_t i = lead; suffix && i < r_in; ++i) {
      suffix = in_shape[i] == out_shape[r_out - (r_in - i)];
    }
    if (suffix) {
      mode_ = Mode::Suffix;
      n_in_ = n_in;
      return;
    }
    mode_ = Mode::General;
    const Index n_out = shape_numel(out_shape);
    offsets_.resize(static_cast<std::size_t>(n_out));
    std::vector<Index> in_strides(r_out, 0);
    const auto st = strides_of(in_shape);
    for (std::size_t i = 0; i < r_in; ++i) {
      if (in_shape[i] != 1) in_strides[r_out - r_in + i] = st[i];
    }
    std::vector<Index> counter(r_out, 0);
    Index off = 0;
    for (Index k = 0; k < n_out; ++k) {
      offsets_[static_cast<std::size_t>(k)] = off;
      for (Index d = static_cast<Index>(r_out) - 1; d >= 0; --d) {
        if (++counter[d] < out_shape[d]) {
          off += in_strides[d];
          break;
        }
        off -= in_strides[d] * (out_shape[d] - 1);
        counter[d] = 0;
      }
    }
  }

  Index operator()(Index k) const {
    switch (mode_) {
      case Mode::Identity:
        return k;
      case Mode::Scalar:
        return 0;
      case Mode::Suffix:
        return k % n_in_;
      case Mode::General:
        return offsets_[static_cast<std::size_t>(k)];
    }
    return k;
  }

 private:
  enum class Mode { Identity, Scalar, Suffix, General };
  Mode mode_ = Mode::Identity;
  Index n_in_ = 1;
  std::vector<Index> offsets_;
};

template <class Fwd, class DA, class DB>
Tensor binary_elementwise(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  Shape out = broadcast_shapes(a.shape(), b.shape());
  const Index n = shape_numel(out);
  auto ma = std::make_shared<BroadcastMap>(a.shape(), out);
  auto mb = std::make_shared<BroadcastMap>(b.shape(), out);
  Buffer v(static_cast<std::size_t>(n));
  const auto av = a.values();
  const auto bv = b.values();
  for (Index k = 0; k < n; ++k) v[k] = fwd(av[(*ma)(k)], bv[(*mb)(k)]);
  return make_op(op, std::move(out), std::move(v), {a, b}, [ma, mb, n, da, db](Node& self) {
    Node& na = in(self, 0);
    Node& nb = in(self, 1);
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto& ga = na.ensure_grad();
      for (Index k = 0; k < n; ++k) {
        const Index ia = (*ma)(k);
        ga[ia] += da(g[k], na.value[ia], nb.value[(*mb)(k)]);
      }
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      for (Index k = 0; k < n; ++k) {
        const Index ib = (*mb)(k);
        gb[ib] += db(g[k], na.value[(*ma)(k)], nb.value[ib]);
      }
    }
  });
}

template <class Fwd, class Deriv>
Tensor unary_elementwise(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xv = x.values();
  Buffer v(xv.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = fwd(xv[i]);
  return make_op(op, x.shape(), std::move(v), {x}, [deriv](Node& self) {
    Node& nx = in(self, 0);
    if (!nx.requires_grad) return;
    auto& gx = nx.ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * deriv(nx.value[i], self.value[i]);
  });
}

Index normalize_axis(Index axis, Index rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError(std::string(op) + ": axis out of range for rank " + std::to_string(rank));
  }
  return axis;
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const Index ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const Index eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcast-compatible");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// --- matmul -------------------------------------------------------------

Tensor matmul_rowwise(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul_rowwise needs [m,k] x [k,n], got " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  Buffer v(static_cast<std::size_t>(m * n), 0.0);
  for (Index i = 0; i < m; ++i)
    for (Index p = 0; p < k; ++p) {
      const double x = pa[i * k + p];
      for (Index j = 0; j < n; ++j) v[i * n + j] += x * pb[p * n + j];
    }
  return make_op("matmul_rowwise", {m, n}, std::move(v), {a, b}, [m, k, n](Node& self) {
    Node& na = in(self, 0);
    Node& nb = in(self, 1);
    const double* g = self.grad.data();
    if (na.requires_grad) {
      double* ga = na.ensure_grad().data();
      for (Index i = 0; i < m; ++i)
        for (Index p = 0; p < k; ++p) {
          double acc = 0.0;
          for (Index j = 0; j < n; ++j) acc += g[i * n + j] * nb.value[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (nb.requires_grad) {
      double* gb = nb.ensure_grad().data();
      for (Index i = 0; i < m; ++i)
        for (Index p = 0; p < k; ++p) {
          const double x = na.value[i * k + p];
          for (Index j = 0; j < n; ++j) gb[p * n + j] += x * g[i * n + j];
        }
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const Index m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2) {
    throw DimensionError("matmul inner extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = broadcast_shapes(a_batch, b_batch);
  } catch (const DimensionError&) {
    throw DimensionError("matmul batch extents incompatible: " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  // Shared right operand: fold the batch into rows for a single GEMM.
  if (b_batch.empty() || shape_numel(b_batch) == 1) {
    if (batch == a_batch) {
      const Index rows = shape_numel(a_batch) * m;
      Buffer v(static_cast<std::size_t>(rows * n));
      MatMap(v.data(), rows, n).noalias() = ConstMatMap(a.values().data(), rows, k) * ConstMatMap(b.values().data(), k, n);
      return make_op("matmul", std::move(out_shape), std::move(v), {a, b}, [rows, k, n](Node& self) {
        Node& na = in(self, 0);
        Node& nb = in(self, 1);
        ConstMatMap g(self.grad.data(), rows, n);
        if (na.requires_grad) {
          MatMap(na.ensure_grad().data(), rows, k).noalias() += g * ConstMatMap(nb.value.data(), k, n).transpose();
        }
        if (nb.requires_grad) {
          MatMap(nb.ensure_grad().data(), k, n).noalias() += ConstMatMap(na.value.data(), rows, k).transpose() * g;
        }
      });
    }
  }

  const Index nb_out = shape_numel(batch);
  auto ma = std::make_shared<BroadcastMap>(a_batch, batch);
  auto mb = std::make_shared<BroadcastMap>(b_batch, batch);
  Buffer v(static_cast<std::size_t>(nb_out * m * n));
  for (Index bi = 0; bi < nb_out; ++bi) {
    const double* pa = a.values().data() + (*ma)(bi) * m * k;
    const double* pb = b.values().data() + (*mb)(bi) * k * n;
    MatMap(v.data() + bi * m * n, m, n).noalias() = ConstMatMap(pa, m, k) * ConstMatMap(pb, k, n);
  }
  return make_op("matmul", std::move(out_shape), std::move(v), {a, b}, [ma, mb, nb_out, m, k, n](Node& self) {
    Node& na = in(self, 0);
    Node& nb = in(self, 1);
    for (Index bi = 0; bi < nb_out; ++bi) {
      ConstMatMap g(self.grad.data() + bi * m * n, m, n);
      const Index oa = (*ma)(bi) * m * k;
      const Index ob = (*mb)(bi) * k * n;
      if (na.requires_grad) {
        MatMap(na.ensure_grad().data() + oa, m, k).noalias() += g * ConstMatMap(nb.value.data() + ob, k, n).transpose();
      }
      if (nb.requires_grad) {
        MatMap(nb.ensure_grad().data() + ob, k, n).noalias() += ConstMatMap(na.value.data() + oa, m, k).transpose() * g;
      }
    }
  });
}

// --- elementwise --------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double g, double x, double y) { return x >= y ? g : 0.0; },
      [](double g, double x, double y) { return x >= y ? 0.0 : g; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary_elementwise(
      "scale", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor reciprocal(const Tensor& x) {
  return unary_elementwise(
      "reciprocal", x, [](double v) { return 1.0 / v; }, [](double, double y) { return -y * y; });
}

Tensor clamp_min(const Tensor& x, double floor) {
  return unary_elementwise(
      "clamp_min", x, [floor](double v) { return v > floor ? v : floor; },
      [floor](double v, double) { return v > floor ? 1.0 : 0.0; });
}

Tensor relu(const Tensor& x) {
  return unary_elementwise(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary_elementwise(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) { return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v); });
}

// --- layout -------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  Index infer = -1, known = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw DimensionError("reshape allows a single -1 extent");
      infer = static_cast<Index>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0 && x.numel() % known == 0) shape[infer] = x.numel() / known;
  if (shape_numel(shape) != x.numel() || (infer >= 0 && shape[infer] <= 0)) {
    throw DimensionError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  const auto xv = x.values();
  return make_op("reshape", std::move(shape), Buffer(xv.begin(), xv.end()), {x}, [](Node& self) {
    Node& nx = in(self, 0);
    if (!nx.requires_grad) return;
    auto& g = nx.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last2 needs rank >= 2, got " + to_string(x.shape()));
  const Index r = x.dim(-2), c = x.dim(-1), batch = x.numel() / (r * c);
  Shape out = x.shape();
  std::swap(out[out.size() - 1], out[out.size() - 2]);
  Buffer v(static_cast<std::size_t>(x.numel()));
  const auto xv = x.values();
  for (Index b = 0; b < batch; ++b) {
    MatMap(v.data() + b * r * c, c, r) = ConstMatMap(xv.data() + b * r * c, r, c).transpose();
  }
  return make_op("transpose_last2", std::move(out), std::move(v), {x}, [r, c, batch](Node& self) {
    Node& nx = in(self, 0);
    if (!nx.requires_grad) return;
    auto& g = nx.ensure_grad();
    for (Index b = 0; b < batch; ++b) {
      MatMap(g.data() + b * r * c, r, c) += ConstMatMap(self.grad.data() + b * r * c, c, r).transpose();
    }
  });
}

Tensor permute(const Tensor& x, const std::vector<Index>& axes) {
  const Index r = x.rank();
  if (static_cast<Index>(axes.size()) != r) throw DimensionError("permute: axes length must equal rank");
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  Shape out(static_cast<std::size_t>(r));
  for (Index i = 0; i < r; ++i) {
    const Index a = axes[i];
    if (a < 0 || a >= r || seen[a]) throw DimensionError("permute: axes must be a permutation");
    seen[a] = true;
    out[i] = x.shape()[a];
  }
  const auto in_strides = strides_of(x.shape());
  std::vector<Index> idx(static_cast<std::size_t>(x.numel()));
  std::vector<Index> counter(static_cast<std::size_t>(r), 0);
  Index off = 0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    idx[k] = off;
    for (Index d = r - 1; d >= 0; --d) {
      const Index s = in_strides[axes[d]];
      if (++counter[d] < out[d]) {
        off += s;
        break;
      }
      off -= s * (out[d] - 1);
      counter[d] = 0;
    }
  }
  return gather(x, make_index_map(std::move(idx)), std::move(out));
}

Tensor gather(const Tensor& x, const IndexMap& index, Shape out_shape) {
  const Index n = shape_numel(out_shape);
  if (!index || static_cast<Index>(index->size()) != n) {
    throw DimensionError("gather: index map size does not match output shape " + to_string(out_shape));
  }
  const auto xv = x.values();
  const Index nx = x.numel();
  Buffer v(static_cast<std::size_t>(n));
  for (Index k = 0; k < n; ++k) {
    const Index s = (*index)[k];
    if (s >= nx) throw DimensionError("gather: index " + std::to_string(s) + " out of range for " + to_string(x.shape()));
    v[k] = s < 0 ? 0.0 : xv[s];
  }
  return make_op("gather", std::move(out_shape), std::move(v), {x}, [index, n](Node& self) {
    Node& nx = in(self, 0);
    if (!nx.requires_grad) return;
    auto& g = nx.ensure_grad();
    for (Index k = 0; k < n; ++k) {
      const Index s = (*index)[k];
      if (s >= 0) g[s] += self.grad[k];
    }
  });
}

Tensor scatter_add(const Tensor& x, const IndexMap& index, Shape out_shape) {
  const Index n = x.numel();
  if (!index || static_cast<Index>(index->size()) != n) {
    throw DimensionError("scatter_add: index map size does not match input " + to_string(x.shape()));
  }
  const Index n_out = shape_numel(out_shape);
  Buffer v(static_cast<std::size_t>(n_out), 0.0);
  const auto xv = x.values();
  for (Index k = 0; k < n; ++k) {
    const Index t = (*index)[k];
    if (t >= n_out) throw DimensionError("scatter_add: index out of range for " + to_string(out_shape));
    if (t >= 0) v[t] += xv[k];
  }
  return make_op("scatter_add", std::move(out_shape), std::move(v), {x}, [index, n](Node& self) {
    Node& nx = in(self, 0);
    if (!nx.requires_grad) return;
    auto& g = nx.ensure_grad();
    for (Index k = 0; k < n; ++k) {
      const Index t = (*index)[k];
      if (t >= 0) g[k] += self.grad[t];
    }
  });
}

Tensor slice0(const Tensor& x, Index begin, Index count) {
  const Index n0 = x.dim(0);
  if (begin < 0 || count <= 0 || begin + count > n0) {
    throw DimensionError("slice0 [" + std::to_string(begin) + ", +" + std::to_string(count) + ") out of range for " +
                         to_string(x.shape()));
  }
  const Index inner = x.numel() / n0;
  Shape out = x.shape();
  out[0] = count;
  const auto xv = x.values();
  Buffer v(xv.begin() + begin * inner, xv.begin() + (begin + count) * inner);
  return make_op("slice0", std::move(out), std::move(v), {x}, [begin, inner](Node& self) {
    Node& nx = in(self, 0);
    if (!nx.requires_grad) return;
    auto& g = nx.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * inner + static_cast<Index>(i)] += self.grad[i];
  });
}

Tensor concat0(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat0 needs at least one tensor");
  Shape out = parts[0].shape();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<Index>(out.size()) ||
        !std::equal(out.begin() + 1, out.end(), p.shape().begin() + 1)) {
      throw DimensionError("concat0: trailing extents differ: " + to_string(out) + " vs " + to_string(p.shape()));
    }
    total += p.dim(0);
  }
  out[0] = total;
  Buffer v;
  v.reserve(static_cast<std::size_t>(shape_numel(out)));
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    offsets.push_back(static_cast<Index>(v.size()));
    v.insert(v.end(), p.values().begin(), p.values().end());
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_op("concat0", std::move(out), std::move(v), std::move(inputs), [offsets](Node& self) {
    for (std::size_t p = 0; p < self.inputs.size(); ++p) {
      Node& np = *self.inputs[p];
      if (!np.requires_grad) continue;
      auto& g = np.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[p] + static_cast<Index>(i)];
    }
  });
}

// --- reductions ---------------------------------------------------------

Tensor reduce_sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_op("reduce_sum", Shape{1}, Buffer{s}, {x}, [](Node& self) {
    Node& nx = in(self, 0);
    if (!nx.requires_grad) return;
    auto& g = nx.ensure_grad();
    for (double& gi : g) gi += self.grad[0];
  });
}

Tensor reduce_mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  return make_op("reduce_mean", Shape{1}, Buffer{s * inv}, {x}, [inv](Node& self) {
    Node& nx = in(self, 0);
    if (!nx.requires_grad) return;
    auto& g = nx.ensure_grad();
    for (double& gi : g) gi += self.grad[0] * inv;
  });
}

namespace {

Tensor reduce_dim(const char* op, const Tensor& x, Index dim, double factor_scale) {
  dim = normalize_axis(dim, x.rank(), op);
  Index outer = 1, inner = 1;
  for (Index i = 0; i < dim; ++i) outer *= x.shape()[i];
  for (Index i = dim + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const Index len = x.shape()[dim];
  const double f = factor_scale > 0 ? 1.0 / static_cast<double>(len) : 1.0;
  Shape out = x.shape();
  out.erase(out.begin() + dim);
  if (out.empty()) out.push_back(1);
  Buffer v(static_cast<std::size_t>(outer * inner), 0.0);
  const auto xv = x.values();
  for (Index o = 0; o < outer; ++o) {
    for (Index l = 0; l < len; ++l) {
      const double* src = xv.data() + (o * len + l) * inner;
      double* dst = v.data() + o * inner;
      for (Index i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  if (f != 1.0) {
    for (double& e : v) e *= f;
  }
  return make_op(op, std::move(out), std::move(v), {x}, [outer, inner, len, f](Node& self) {
    Node& nx = in(self, 0);
    if (!nx.requires_grad) return;
    auto& g = nx.ensure_grad();
    for (Index o = 0; o < outer; ++o) {
      for (Index l = 0; l < len; ++l) {
        double* dst = g.data() + (o * len + l) * inner;
        const double* src = self.grad.data() + o * inner;
        for (Index i = 0; i < inner; ++i) dst[i] += src[i] * f;
      }
    }
  });
}

}  // namespace

Tensor sum_dim(const Tensor& x, Index dim) { return reduce_dim("sum_dim", x, dim, 0.0); }
Tensor mean_dim(const Tensor& x, Index dim) { return reduce_dim("mean_dim", x, dim, 1.0); }

// --- row-wise normalizers ------------------------------------------------

Tensor softmax_lastdim(const Tensor& x) {
  if (x.numel() == 0 || x.rank() == 0) throw DimensionError("softmax_lastdim on an empty tensor");
  const Index len = x.dim(-1);
  const Index rows = x.numel() / len;
  const auto xv = x.values();
  Buffer v(xv.size());
  for (Index r = 0; r < rows; ++r) {
    const double* src = xv.data() + r * len;
    double* dst = v.data() + r * len;
    const double mx = *std::max_element(src, src + len);
    double sum = 0.0;
    for (Index j = 0; j < len; ++j) {
      dst[j] = std::exp(src[j] - mx);
      sum += dst[j];
    }
    const double inv = 1.0 / sum;
    for (Index j = 0; j < len; ++j) dst[j] *= inv;
  }
  return make_op("softmax", x.shape(), std::move(v), {x}, [rows, len](Node& self) {
    Node& nx = in(self, 0);
    if (!nx.requires_grad) return;
    auto& g = nx.ensure_grad();
    for (Index r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * len;
      const double* dy = self.grad.data() + r * len;
      double dot = 0.0;
      for (Index j = 0; j < len; ++j) dot += dy[j] * y[j];
      for (Index j = 0; j < len; ++j) g[r * len + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(eps > 0.0)) throw ParameterError("layer_norm eps must be positive");
  const Index c = x.dim(-1);
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("layer_norm affine extents " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                         " do not match last extent of " + to_string(x.shape()));
  }
  const Index rows = x.numel() / c;
  auto xhat = std::make_shared<Buffer>(x.values().size());
  auto rstd = std::make_shared<Buffer>(static_cast<std::size_t>(rows));
  Buffer v(x.values().size());
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  const double inv_c = 1.0 / static_cast<double>(c);
  for (Index r = 0; r < rows; ++r) {
    const double* src = xv.data() + r * c;
    double mean = 0.0;
    for (Index j = 0; j < c; ++j) mean += src[j];
    mean *= inv_c;
    double var = 0.0;
    for (Index j = 0; j < c; ++j) var += (src[j] - mean) * (src[j] - mean);
    var *= inv_c;
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (Index j = 0; j < c; ++j) {
      const double h = (src[j] - mean) * rs;
      (*xhat)[r * c + j] = h;
      v[r * c + j] = h * gv[j] + bv[j];
    }
  }
  return make_op("layer_norm", x.shape(), std::move(v), {x, gamma, beta}, [xhat, rstd, rows, c, inv_c](Node& self) {
    Node& nx = in(self, 0);
    Node& ng = in(self, 1);
    Node& nb = in(self, 2);
    const auto& dy = self.grad;
    if (ng.requires_grad) {
      auto& gg = ng.ensure_grad();
      for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < c; ++j) gg[j] += dy[r * c + j] * (*xhat)[r * c + j];
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < c; ++j) gb[j] += dy[r * c + j];
    }
    if (nx.requires_grad) {
      auto& gx = nx.ensure_grad();
      for (Index r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (Index j = 0; j < c; ++j) {
          const double dh = dy[r * c + j] * ng.value[j];
          m1 += dh;
          m2 += dh * (*xhat)[r * c + j];
        }
        m1 *= inv_c;
        m2 *= inv_c;
        for (Index j = 0; j < c; ++j) {
          const double dh = dy[r * c + j] * ng.value[j];
          gx[r * c + j] += (*rstd)[r] * (dh - m1 - (*xhat)[r * c + j] * m2);
        }
      }
    }
  });
}

Tensor normalize_lastdim(const Tensor& x, double eps) {
  const Index c = x.dim(-1);
  const Index rows = x.numel() / c;
  auto denom = std::make_shared<Buffer>(static_cast<std::size_t>(rows));
  auto clamped = std::make_shared<std::vector<bool>>(static_cast<std::size_t>(rows));
  Buffer v(x.values().size());
  const auto xv = x.values();
  for (Index r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (Index j = 0; j < c; ++j) ss += xv[r * c + j] * xv[r * c + j];
    const double norm = std::sqrt(ss);
    const bool floor_hit = !(norm > eps);
    const double d = floor_hit ? eps : norm;
    (*denom)[r] = d;
    (*clamped)[r] = floor_hit;
    const double inv = 1.0 / d;
    for (Index j = 0; j < c; ++j) v[r * c + j] = xv[r * c + j] * inv;
  }
  return make_op("normalize_lastdim", x.shape(), std::move(v), {x}, [denom, clamped, rows, c](Node& self) {
    Node& nx = in(self, 0);
    if (!nx.requires_grad) return;
    auto& g = nx.ensure_grad();
    for (Index r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * c;
      const double* dy = self.grad.data() + r * c;
      const double inv = 1.0 / (*denom)[r];
      if ((*clamped)[r]) {
        for (Index j = 0; j < c; ++j) g[r * c + j] += dy[j] * inv;
        continue;
      }
      double dot = 0.0;
      for (Index j = 0; j < c; ++j) dot += y[j] * dy[j];
      for (Index j = 0; j < c; ++j) g[r * c + j] += (dy[j] - y[j] * dot) * inv;
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy expects [B, K] logits, got " + to_string(logits.shape()));
  const Index b = logits.dim(0), k = logits.dim(1);
  if (static_cast<Index>(labels.size()) != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " + std::to_string(b));
  }
  auto probs = std::make_shared<Buffer>(static_cast<std::size_t>(b * k));
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  const auto lv = logits.values();
  double total = 0.0;
  for (Index r = 0; r < b; ++r) {
    const int y = labels[r];
    if (y < 0 || y >= k) throw ParameterError("label " + std::to_string(y) + " out of range [0, " + std::to_string(k) + ")");
    const double* src = lv.data() + r * k;
    const double mx = *std::max_element(src, src + k);
    double sum = 0.0;
    for (Index j = 0; j < k; ++j) {
      (*probs)[r * k + j] = std::exp(src[j] - mx);
      sum += (*probs)[r * k + j];
    }
    for (Index j = 0; j < k; ++j) (*probs)[r * k + j] /= sum;
    total += (mx + std::log(sum)) - src[y];
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  return make_op("cross_entropy", Shape{1}, Buffer{total * inv_b}, {logits}, [probs, lab, b, k, inv_b](Node& self) {
    Node& nl = in(self, 0);
    if (!nl.requires_grad) return;
    auto& g = nl.ensure_grad();
    const double up = self.grad[0] * inv_b;
    for (Index r = 0; r < b; ++r) {
      for (Index j = 0; j < k; ++j) {
        const double t = j == (*lab)[r] ? 1.0 : 0.0;
        g[r * k + j] += up * ((*probs)[r * k + j] - t);
      }
    }
  });
}

// --- recompute ----------------------------------------------------------------

Tensor recompute(std::function<Tensor(const Tensor&)> fn, const Tensor& x) {
  if (active_tape() == nullptr) return fn(x);
  Tensor y;
  {
    NoGradScope no_grad;
    y = fn(x.detach());
  }
  const auto yv = y.values();
  auto body = std::make_shared<std::function<Tensor(const Tensor&)>>(std::move(fn));
  return make_op(
      "recompute", y.shape(), Buffer(yv.begin(), yv.end()), {x},
      [body](Node& self) {
        Node& nx = in(self, 0);
        Tensor xin(nx.shape, nx.value, nx.requires_grad);
        Tape inner;
        Tensor out;
        {
          TapeScope scope(inner);
          out = (*body)(xin);
        }
        if (!out.requires_grad()) return;
        inner.backward(out, self.grad);
        if (nx.requires_grad && xin.has_grad()) {
          Buffer& g = nx.ensure_grad();
          const auto xg = xin.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += xg[i];
        }
      },
      true);
}

}  // namespace swinlab
