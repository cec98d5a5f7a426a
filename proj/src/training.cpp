#include "swinlab/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>

#include "swinlab/ops.hpp"

namespace swinlab {

void adamw_step(std::span<Tensor> params, std::span<const std::span<const double>> grads,
                std::span<const bool> decay, OptimState& st, double lr) {
  if (grads.size() != params.size() || decay.size() != params.size()) {
    throw DimensionError("adamw_step: params, grads and decay flags differ in count");
  }
  if (st.m.empty()) {
    for (const Tensor& p : params) {
      st.m.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
      st.v.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw DimensionError("adamw_step: optimizer state tracks a different model");
  st.step += 1;
  const auto& c = st.cfg;
  const double t = static_cast<double>(st.step);
  const double step_size = lr * std::sqrt(1.0 - std::pow(c.beta2, t)) / (1.0 - std::pow(c.beta1, t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].mutable_values();
    const auto g = grads[k];
    auto& m = st.m[k];
    auto& v = st.v[k];
    if (g.size() != w.size() || m.size() != w.size()) {
      throw DimensionError("adamw_step: gradient " + std::to_string(k) + " has " + std::to_string(g.size()) +
                           " values for a parameter of " + std::to_string(w.size()));
    }
    const double shrink = decay[k] ? lr * c.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      w[i] -= shrink * w[i];
      w[i] -= step_size * m[i] / (std::sqrt(v[i]) + c.eps);
    }
  }
}

double clip_grad_norm(std::span<const std::span<double>> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && std::isfinite(norm)) {
    const double f = max_norm / norm;
    for (const auto& g : grads)
      for (double& x : g) x *= f;
  }
  return norm;
}

double lr_at(const Schedule& s, Index step) {
  if (s.warmup_steps < 0 || s.total_steps < 1 || s.warmup_steps > s.total_steps) {
    throw ParameterError("schedule needs 0 <= warmup <= total and total >= 1");
  }
  if (step < 0 || step > s.total_steps) {
    throw ParameterError("schedule step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) +
                         "]");
  }
  if (step < s.warmup_steps) return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (s.total_steps == s.warmup_steps) return s.base_lr;
  const double progress =
      static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

RunReport train(Model& model, const BlobDataset& data, const TrainConfig& cfg) {
  if (cfg.steps < 0 || cfg.batch < 1) throw ConfigError("train needs steps >= 0 and batch >= 1");
  const Index n = data.size();
  for (Index i = 0; i < std::min<Index>(n, data.config().classes); ++i) {
    if (data.label(i) >= model.config().num_classes) throw ConfigError("dataset labels exceed the model's classes");
  }
  NamedTensors named = model.parameters();
  std::vector<Tensor> params;
  std::vector<char> decay_flags;
  for (auto& [name, t] : named) {
    params.push_back(t);
    decay_flags.push_back(decays(name, t) ? 1 : 0);
  }
  std::unique_ptr<bool[]> decay(new bool[params.size()]);
  for (std::size_t k = 0; k < params.size(); ++k) decay[k] = decay_flags[k] != 0;

  OptimState opt;
  opt.cfg.weight_decay = cfg.weight_decay;
  const Schedule sched{cfg.lr, std::min(cfg.warmup, cfg.steps), std::max<Index>(cfg.steps, 1)};
  std::mt19937_64 rng(cfg.seed ^ 0x5eedULL);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  RunReport report;
  for (Index step = 0; step < cfg.steps; ++step) {
    std::vector<Index> ids;
    while (static_cast<Index>(ids.size()) < cfg.batch) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      ids.push_back(order[cursor++]);
    }
    StepRecord rec;
    rec.step = step;
    rec.lr = lr_at(sched, step + 1);
    try {
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        const Tensor logits = model.forward(data.images(ids), {cfg.checkpoint_segment, nullptr});
        const std::vector<int> labels = data.labels(ids);
        loss = cross_entropy(logits, labels);
      }
      rec.loss = loss.item();
      tape.backward(loss);
    } catch (const NumericError& e) {
      rec.loss = std::numeric_limits<double>::quiet_NaN();
      rec.grad_norm = std::numeric_limits<double>::quiet_NaN();
      rec.flag = true;
      report.steps.push_back(rec);
      report.diverged = true;
      report.divergence = std::string("non-finite value in ") + e.op() + ": " + e.what();
      for (auto& p : params) p.zero_grad();
      break;
    }
    std::vector<std::span<double>> grads;
    for (auto& p : params) grads.push_back(p.grad_buffer());
    rec.grad_norm = clip_grad_norm(grads, cfg.clip);
    if (!std::isfinite(rec.grad_norm) || rec.grad_norm > cfg.divergence_grad_norm) {
      rec.flag = true;
      report.steps.push_back(rec);
      report.diverged = true;
      report.divergence = "gradient norm " + std::to_string(rec.grad_norm) + " above threshold";
      for (auto& p : params) p.zero_grad();
      break;
    }
    std::vector<std::span<const double>> cgrads(grads.begin(), grads.end());
    adamw_step(params, cgrads, std::span<const bool>(decay.get(), params.size()), opt, rec.lr);
    for (auto& p : params) p.zero_grad();
    report.steps.push_back(rec);
  }
  if (!report.diverged) report.train_accuracy = evaluate(model, data, cfg.eval_samples);
  return report;
}

double evaluate(const Model& model, const BlobDataset& data, Index count, Index batch) {
  NoGradScope no_grad;
  const Index n = count > 0 ? std::min(count, data.size()) : data.size();
  Index correct = 0;
  for (Index start = 0; start < n; start += batch) {
    std::vector<Index> ids;
    for (Index i = start; i < std::min(n, start + batch); ++i) ids.push_back(i);
    const Tensor logits = model.forward(data.images(ids));
    const Index k = logits.dim(1);
    const auto v = logits.values();
    for (std::size_t r = 0; r < ids.size(); ++r) {
      const double* row = v.data() + static_cast<Index>(r) * k;
      const auto best = std::max_element(row, row + k) - row;
      if (best == data.label(ids[r])) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

namespace {

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

}  // namespace

void write_report_csv(const RunReport& report, std::ostream& out) {
  out << "step,loss,grad_norm,lr,flag\n";
  for (const auto& r : report.steps) {
    out << r.step << ',' << format_double(r.loss) << ',' << format_double(r.grad_norm) << ',' << format_double(r.lr)
        << ',' << (r.flag ? 1 : 0) << '\n';
  }
}

Tensor checkpointed_forward(const Model& model, const Tensor& images, Index segment_size) {
  if (segment_size < 1) throw ParameterError("segment_size must be >= 1");
  return model.forward(images, {segment_size, nullptr});
}

Model transfer_window(const Checkpoint& ckpt, const ModelConfig& source, Index new_window, Index new_image_size) {
  source.validate();
  ModelConfig target = source;
  if (new_image_size > 0) target.image_size = new_image_size;
  const Index stage1 = target.image_size / target.patch;
  if (new_window < 2 || new_window > stage1) {
    throw GeometryError("window " + std::to_string(new_window) + " incompatible with a " + std::to_string(stage1) +
                        "x" + std::to_string(stage1) + " stage-1 feature map");
  }
  target.window = new_window;
  target.pretrained_window = source.pretrained_window > 0 ? source.pretrained_window : source.window;
  Model model(target, 0);
  const auto src_geo = stage_geometry(source);
  const auto dst_geo = model.geometry();

  NamedTensors params = model.parameters();
  if (params.size() != ckpt.entries.size()) {
    throw FormatError("checkpoint has " + std::to_string(ckpt.entries.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (auto& [name, t] : params) {
    const ArchiveEntry* e = ckpt.find(name);
    if (e == nullptr) throw FormatError("checkpoint is missing tensor " + name);
    std::vector<double> values = e->values;
    Shape shape = e->shape;
    if (name.ends_with(".attn.bias_table")) {
      const auto s = static_cast<std::size_t>(std::stoi(name.substr(std::string("layers.").size())));
      const Index from = src_geo[s].window, to = dst_geo[s].window;
      if (from != to) {
        ParamTable table{from, e->shape.at(1), Tensor::from_vector(e->shape, e->values)};
        const ParamTable moved = bicubic_transfer(table, to);
        values = moved.table.to_vector();
        shape = moved.table.shape();
      }
    }
    if (shape != t.shape()) {
      throw FormatError("tensor " + name + " has shape " + to_string(shape) + ", model expects " +
                        to_string(t.shape()));
    }
    auto dst = t.mutable_values();
    std::copy(values.begin(), values.end(), dst.begin());
  }
  return model;
}

}  // namespace swinlab
