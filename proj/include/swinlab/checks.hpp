#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "swinlab/position_bias.hpp"
#include "swinlab/tensor.hpp"

namespace swinlab {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct CheckOptions {
  /// Runs the cosine-bound suite with the tau floor lowered to this value.
  std::optional<double> injected_tau_floor;
};

/// Names accepted by run_checks, in execution order.
std::vector<std::string> check_names();

/// Runs the named suites (all when `only` is empty). Unknown names raise
/// ConfigError.
std::vector<CheckResult> run_checks(const std::vector<std::string>& only, const CheckOptions& opts = {});

/// Central-difference check of d loss / d param for every element of each
/// parameter (or `samples` random elements when positive). Passes when
/// |fd - analytic| <= tol * max(|fd| + |analytic|, 1e-4).
struct GradCheck {
  bool passed = true;
  double worst = 0.0;
  std::string worst_at;
};

GradCheck finite_difference_check(const std::function<Tensor()>& loss, const NamedTensors& params, double tol,
                                  Index samples = 0, double step = 1e-6, std::uint64_t seed = 0);

}  // namespace swinlab
