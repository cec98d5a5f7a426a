#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "swinlab/archive.hpp"
#include "swinlab/dataset.hpp"
#include "swinlab/model.hpp"

namespace swinlab {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

struct OptimState {
  AdamWConfig cfg;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One decoupled AdamW update. The step size carries the bias correction,
/// lr * sqrt(1 - b2^t) / (1 - b1^t), and eps is added to sqrt(v).
void adamw_step(std::span<Tensor> params, std::span<const std::span<const double>> grads,
                std::span<const bool> decay, OptimState& state, double lr);

/// Scales grads in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<const std::span<double>> grads, double max_norm);

struct Schedule {
  double base_lr = 1e-3;
  Index warmup_steps = 0;
  Index total_steps = 1;
};

/// Linear warm-up from 0, then cosine decay to 0 at total_steps.
double lr_at(const Schedule& sched, Index step);

struct TrainConfig {
  Index steps = 200;
  Index batch = 16;
  Index warmup = 20;
  double lr = 1e-3;
  double weight_decay = 0.05;
  double clip = 5.0;
  Index checkpoint_segment = 0;
  std::uint64_t seed = 0;
  double divergence_grad_norm = 1e6;
  /// Samples scored for the final train accuracy; 0 scores the whole set.
  Index eval_samples = 0;
};

struct StepRecord {
  Index step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  bool flag = false;
};

struct RunReport {
  std::vector<StepRecord> steps;
  bool diverged = false;
  std::string divergence;
  double train_accuracy = std::numeric_limits<double>::quiet_NaN();
};

/// Mini-batch cross-entropy training. Divergence (non-finite values or a
/// grad norm above the threshold) stops the run and flags the report.
RunReport train(Model& model, const BlobDataset& data, const TrainConfig& cfg);

/// Top-1 accuracy over the first `count` samples (all when count is 0).
double evaluate(const Model& model, const BlobDataset& data, Index count = 0, Index batch = 32);

void write_report_csv(const RunReport& report, std::ostream& out);

Tensor checkpointed_forward(const Model& model, const Tensor& images, Index segment_size);

/// Rebuilds a model at a new window (and optionally a new input size) from a
/// checkpoint. Parameter tables are resampled bicubically; continuous-bias
/// nets and all other weights are copied.
Model transfer_window(const Checkpoint& ckpt, const ModelConfig& source, Index new_window, Index new_image_size = 0);

}  // namespace swinlab
