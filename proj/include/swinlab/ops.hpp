#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "swinlab/tensor.hpp"

namespace swinlab {

/// Flat source offsets for `gather`; a negative entry yields zero (padding).
using IndexMap = std::shared_ptr<const std::vector<Index>>;

inline IndexMap make_index_map(std::vector<Index> idx) {
  return std::make_shared<const std::vector<Index>>(std::move(idx));
}

// Products and elementwise arithmetic. Elementwise ops broadcast numpy-style.
Tensor matmul(const Tensor& a, const Tensor& b);
/// [m,k] x [k,n] where every output row comes from the same scalar loop, so a
/// row's value does not depend on how many rows are multiplied with it.
Tensor matmul_rowwise(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor reciprocal(const Tensor& x);
Tensor clamp_min(const Tensor& x, double floor);
Tensor maximum(const Tensor& a, const Tensor& b);

// Layout.
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose_last2(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<Index>& axes);
Tensor gather(const Tensor& x, const IndexMap& index, Shape out_shape);
/// Adjoint of gather: out[index[i]] += x[i]. `index` has one entry per element of x.
Tensor scatter_add(const Tensor& x, const IndexMap& index, Shape out_shape);
Tensor slice0(const Tensor& x, Index begin, Index count);
Tensor concat0(std::span<const Tensor> parts);

// Reductions.
Tensor reduce_sum(const Tensor& x);
Tensor reduce_mean(const Tensor& x);
Tensor sum_dim(const Tensor& x, Index dim);
Tensor mean_dim(const Tensor& x, Index dim);

// Nonlinearities and normalizers.
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Rows of the last axis divided by max(||row||, eps).
Tensor normalize_lastdim(const Tensor& x, double eps = 1e-12);

/// Mean cross-entropy of logits [B, K] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

/// Evaluates fn(x) without keeping its intermediates; backward re-runs fn on
/// a private tape. Leaves reached by fn receive gradients as usual.
Tensor recompute(std::function<Tensor(const Tensor&)> fn, const Tensor& x);

Shape broadcast_shapes(const Shape& a, const Shape& b);

}  // namespace swinlab
