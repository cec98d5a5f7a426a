#include "swinlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace swinlab {

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local Stats g_stats;
thread_local std::uint64_t g_next_id = 1;

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

NumericError::NumericError(std::string op, const std::string& detail)
    : Error("non-finite value produced by '" + op + "': " + detail), op_(std::move(op)) {}

namespace detail {

Node::Node(Shape s, Buffer v) : shape(std::move(s)), value(std::move(v)), id(g_next_id++) {
  g_stats.live_nodes += 1;
  g_stats.live_bytes += static_cast<std::int64_t>(value.size() * sizeof(double));
  g_stats.peak_live_nodes = std::max(g_stats.peak_live_nodes, g_stats.live_nodes);
  g_stats.peak_live_bytes = std::max(g_stats.peak_live_bytes, g_stats.live_bytes);
}

Node::~Node() {
  g_stats.live_nodes -= 1;
  g_stats.live_bytes -= static_cast<std::int64_t>(value.size() * sizeof(double));
}

Buffer& Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

void validate_shape(const Shape& shape, std::size_t n) {
  for (Index e : shape) {
    if (e <= 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
  }
  if (static_cast<std::size_t>(shape_numel(shape)) != n) {
    throw DimensionError("shape " + to_string(shape) + " does not hold " + std::to_string(n) +
                         " values");
  }
}

void validate_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError("leaf", "tensor constructed with NaN/Inf");
  }
}

}  // namespace

Tensor::Tensor(Shape shape, Buffer values, bool requires_grad) {
  validate_shape(shape, values.size());
  validate_finite(values);
  node_ = std::make_shared<detail::Node>(std::move(shape), std::move(values));
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::initializer_list<double> values, bool requires_grad)
    : Tensor(std::move(shape), Buffer(values.begin(), values.end()), requires_grad) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const Index n = shape_numel(shape);
  return Tensor(std::move(shape), Buffer(static_cast<std::size_t>(std::max<Index>(n, 0)), value),
                requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor(Shape{1}, Buffer{value}, requires_grad); }

Tensor Tensor::from_vector(Shape shape, const std::vector<double>& values, bool requires_grad) {
  return Tensor(std::move(shape), Buffer(values.begin(), values.end()), requires_grad);
}

detail::Node& Tensor::node() const {
  if (!node_) throw UsageError("operation on an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }

Index Tensor::dim(Index axis) const {
  const Index r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  }
  return shape()[static_cast<std::size_t>(axis)];
}

std::vector<double> Tensor::to_vector() const {
  const auto& v = node().value;
  return {v.begin(), v.end()};
}

std::span<double> Tensor::mutable_values() {
  if (!is_leaf()) throw UsageError("only leaf tensors may be modified in place");
  return node().value;
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() needs a single-element tensor, got " + to_string(shape()));
  return node().value[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw UsageError("requires_grad can only be set on leaf tensors");
  node().requires_grad = on;
  return *this;
}

Tensor Tensor::grad() const {
  const auto& n = node();
  if (n.grad.empty()) return Tensor::zeros(n.shape);
  return Tensor(n.shape, n.grad);
}

std::span<double> Tensor::grad_buffer() { return node().ensure_grad(); }

void Tensor::zero_grad() {
  auto& g = node().grad;
  std::fill(g.begin(), g.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(node().shape, node().value); }

// --- tape ---------------------------------------------------------------

Tape::~Tape() {
  for (auto& n : nodes_) n->tape = nullptr;
}

void Tape::record(std::shared_ptr<detail::Node> node) {
  if (consumed_) throw UsageError("cannot record on a tape after backward; start a new forward pass");
  node->tape = this;
  nodes_.push_back(std::move(node));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw UsageError("backward on an undefined tensor");
  if (loss.numel() != 1) {
    throw UsageError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  const double one = 1.0;
  run(loss.node_ptr(), std::span<const double>(&one, 1));
}

void Tape::backward(const Tensor& output, std::span<const double> seed) {
  if (!output.defined()) throw UsageError("backward on an undefined tensor");
  if (static_cast<Index>(seed.size()) != output.numel()) {
    throw DimensionError("backward seed has " + std::to_string(seed.size()) + " values for output " +
                         to_string(output.shape()));
  }
  run(output.node_ptr(), seed);
}

void Tape::run(const std::shared_ptr<detail::Node>& out, std::span<const double> seed) {
  if (consumed_) throw UsageError("second backward pass without a new forward pass");
  if (out->tape != this) {
    if (out->backward_done) throw UsageError("second backward pass without a new forward pass");
    throw UsageError("backward through a tensor not recorded on this tape (detached graph)");
  }
  auto& g = out->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];

  visit_order_.clear();
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node& n = **it;
    if (n.grad.empty()) continue;
    visit_order_.push_back(n.id);
    n.backward_fn(n);
  }
  consumed_ = true;
  for (auto& n : nodes_) {
    n->tape = nullptr;
    n->backward_done = true;
    n->backward_fn = nullptr;
    n->inputs.clear();
  }
  nodes_.clear();
}

Tape* active_tape() noexcept { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
  if (!loss.defined()) throw UsageError("backward on an undefined tensor");
  if (loss.numel() != 1) {
    throw UsageError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  const auto& node = loss.node_ptr();
  if (node->tape == nullptr) {
    if (node->backward_done) throw UsageError("second backward pass without a new forward pass");
    throw UsageError("loss is not attached to an active tape (detached graph)");
  }
  node->tape->backward(loss);
}

Stats& stats() noexcept { return g_stats; }

void reset_stats() noexcept {
  g_stats.peak_live_nodes = g_stats.live_nodes;
  g_stats.peak_live_bytes = g_stats.live_bytes;
  g_stats.forward_ops = 0;
}

}  // namespace swinlab
