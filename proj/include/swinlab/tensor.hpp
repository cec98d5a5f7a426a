#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace swinlab {

using Index = std::int64_t;
using Shape = std::vector<Index>;
// 64-byte aligned storage keeps Eigen's vectorized kernels on the same code
// path from run to run, which the bit-exact reproducibility tests rely on.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

std::string to_string(const Shape& shape);
Index shape_numel(const Shape& shape);

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class DimensionError : public Error {
 public:
  using Error::Error;
};
class ParameterError : public Error {
 public:
  using Error::Error;
};
class GeometryError : public Error {
 public:
  using Error::Error;
};
class UsageError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class FormatError : public Error {
 public:
  using Error::Error;
};
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Raised when an operation produces NaN or Inf. Carries the op name so the
/// training loop can report where divergence started.
class NumericError : public Error {
 public:
  NumericError(std::string op, const std::string& detail);
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

class Tape;

namespace detail {

struct Node {
  Node(Shape s, Buffer v);
  ~Node();
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  Buffer& ensure_grad();

  Shape shape;
  Buffer value;
  Buffer grad;  // empty until something flows into it
  bool requires_grad = false;
  bool backward_done = false;
  const char* op = "leaf";
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  Tape* tape = nullptr;
};

}  // namespace detail

/// Dense row-major f64 tensor with optional gradient tracking. Copies share
/// the underlying node; values are immutable once produced by an op.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Buffer values, bool requires_grad = false);
  Tensor(Shape shape, std::initializer_list<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, const std::vector<double>& values,
                            bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  Index rank() const { return static_cast<Index>(shape().size()); }
  Index dim(Index axis) const;
  Index numel() const { return static_cast<Index>(node().value.size()); }

  std::span<const double> values() const { return node().value; }
  std::vector<double> to_vector() const;
  /// Writable view, leaves only (parameters, inputs).
  std::span<double> mutable_values();
  double item() const;
  double operator[](Index flat) const { return node().value[static_cast<std::size_t>(flat)]; }

  bool requires_grad() const { return node().requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return node().backward_fn == nullptr && node().inputs.empty(); }
  const char* op() const { return node().op; }

  bool has_grad() const { return !node().grad.empty(); }
  /// Gradient as a fresh tensor; zeros when nothing reached this node.
  Tensor grad() const;
  /// Gradient storage, allocated as zeros on first access.
  std::span<double> grad_buffer();
  void zero_grad();

  /// Fresh leaf holding a copy of the values.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  detail::Node& node() const;
  std::shared_ptr<detail::Node> node_;
};

/// Records differentiable ops in creation order for one forward pass.
/// Backward replays them in reverse, which is a reverse topological order.
class Tape {
 public:
  Tape() = default;
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<detail::Node> node);

  /// Scalar loss, seed 1.
  void backward(const Tensor& loss);
  /// Arbitrary output with an explicit upstream gradient.
  void backward(const Tensor& output, std::span<const double> seed);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }
  /// Node ids in the order backward visited them.
  const std::vector<std::uint64_t>& visit_order() const noexcept { return visit_order_; }

 private:
  void run(const std::shared_ptr<detail::Node>& out, std::span<const double> seed);

  std::vector<std::shared_ptr<detail::Node>> nodes_;
  std::vector<std::uint64_t> visit_order_;
  bool consumed_ = false;
};

Tape* active_tape() noexcept;

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording; results of ops inside are constants.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

/// Backward through the tape that produced `loss`.
void backward(const Tensor& loss);

/// Per-thread instrumentation used by the memory and recompute checks.
struct Stats {
  std::int64_t live_nodes = 0;
  std::int64_t peak_live_nodes = 0;
  std::int64_t live_bytes = 0;
  std::int64_t peak_live_bytes = 0;
  std::int64_t forward_ops = 0;
};

Stats& stats() noexcept;
/// Peaks restart from the current live values; op counter restarts at zero.
void reset_stats() noexcept;

}  // namespace swinlab
