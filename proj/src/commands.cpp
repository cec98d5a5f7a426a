#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "swinlab/archive.hpp"
#include "swinlab/checks.hpp"
#include "swinlab/cli.hpp"
#include "swinlab/run_spec.hpp"
#include "swinlab/training.hpp"

namespace swinlab {

namespace fs = std::filesystem;

namespace {

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

std::string fixed(double x, int digits) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << x;
  return s.str();
}

std::ofstream open_output(const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path.string());
  return f;
}

fs::path prepare_out(const RunSpec& spec) {
  const fs::path out = spec.str("out");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw ConfigError("cannot create output directory " + out.string() + ": " + ec.message());
  auto meta = open_output(out / "meta.cfg");
  meta << spec.echo();
  return out;
}

std::uint64_t test_seed(std::uint64_t seed) { return seed ^ 0x7e57da7aULL; }

Model load_model(const RunSpec& spec, const ModelConfig& cfg) {
  Model model(cfg, spec.u64("seed"));
  if (spec.has("ckpt")) {
    restore(model, load_checkpoint(spec.str("ckpt")));
  } else if (spec.str("init") != "random") {
    throw ConfigError("need --ckpt FILE or --init random");
  }
  return model;
}

int cmd_train(const RunSpec& spec) {
  const ModelConfig mc = spec.model_config();
  const TrainConfig tc = spec.train_config();
  BlobTaskConfig task = spec.task_config();
  const BlobDataset data(spec.integer("train_size"), tc.seed, task);
  Model model(mc, tc.seed);
  if (spec.has("ckpt")) restore(model, load_checkpoint(spec.str("ckpt")));
  const fs::path out = prepare_out(spec);

  const RunReport report = train(model, data, tc);
  {
    auto csv = open_output(out / "report.csv");
    write_report_csv(report, csv);
  }
  save_checkpoint(snapshot(model), out / "model.ckpt");
  if (report.diverged) {
    std::cerr << "swinlab: training diverged at step " << report.steps.back().step << ": " << report.divergence
              << "\n";
    return kExitDiverged;
  }
  const double loss = report.steps.empty() ? std::nan("") : report.steps.back().loss;
  std::cout << "steps=" << report.steps.size() << " final_loss=" << format_double(loss)
            << " train_accuracy=" << format_double(report.train_accuracy) << "\n";
  return kExitOk;
}

int cmd_transfer(const RunSpec& spec) {
  const ModelConfig mc = spec.model_config();
  const Index target_window = spec.has("target_window") ? spec.integer("target_window") : 2 * mc.window;
  Index target_size = 0;
  if (spec.has("target_image_size")) {
    target_size = spec.integer("target_image_size");
  } else {
    if (mc.image_size * target_window % mc.window != 0) {
      throw ConfigError("image size " + std::to_string(mc.image_size) + " does not scale to window " +
                        std::to_string(target_window) + "; pass --target-image-size");
    }
    target_size = mc.image_size * target_window / mc.window;
  }
  const Model source = load_model(spec, mc);
  const Checkpoint ckpt = snapshot(source);
  const Model target = transfer_window(ckpt, mc, target_window, target_size);
  const fs::path out = prepare_out(spec);

  std::cout << format_ratio_line(mc.window, target_window) << "\n";
  std::cout << "extrapolation_ratio linear=" << fixed(extrapolation_ratio(mc.window, target_window, Spacing::Linear), 6)
            << " log=" << fixed(extrapolation_ratio(mc.window, target_window, Spacing::Log), 6) << "\n";

  const std::uint64_t seed = spec.u64("seed");
  BlobTaskConfig eval_task = spec.task_config();
  eval_task.max_scale = 1.0;
  const Index test_size = spec.integer("test_size");
  const BlobDataset source_test(test_size, test_seed(seed), eval_task);
  const BlobDataset target_test(test_size, test_seed(seed), eval_task.resized(target_size));
  const double source_acc = evaluate(source, source_test);
  const double target_acc = evaluate(target, target_test);

  auto csv = open_output(out / "transfer.csv");
  csv << "model,window,image_size,accuracy\n";
  csv << "source," << mc.window << ',' << mc.image_size << ',' << format_double(source_acc) << '\n';
  csv << "target," << target_window << ',' << target_size << ',' << format_double(target_acc) << '\n';
  std::cout << "source window=" << mc.window << " accuracy=" << format_double(source_acc) << "\n";
  std::cout << "target window=" << target_window << " accuracy=" << format_double(target_acc)
            << " drop=" << format_double(source_acc - target_acc) << "\n";

  const Index finetune = spec.integer("finetune_steps");
  if (finetune > 0) {
    Model tuned = transfer_window(ckpt, mc, target_window, target_size);
    TrainConfig tc = spec.train_config();
    tc.steps = finetune;
    tc.warmup = std::min(tc.warmup, finetune);
    tc.eval_samples = 1;
    const BlobDataset train_data(spec.integer("train_size"), seed, spec.task_config().resized(target_size));
    const RunReport report = train(tuned, train_data, tc);
    if (report.diverged) {
      std::cerr << "swinlab: fine-tuning diverged: " << report.divergence << "\n";
      return kExitDiverged;
    }
    const double tuned_acc = evaluate(tuned, target_test);
    csv << "finetuned," << target_window << ',' << target_size << ',' << format_double(tuned_acc) << '\n';
    std::cout << "finetuned steps=" << finetune << " accuracy=" << format_double(tuned_acc) << "\n";
    save_checkpoint(snapshot(tuned), out / "finetuned.ckpt");
  }
  save_checkpoint(snapshot(target), out / "transfer.ckpt");
  return kExitOk;
}

int cmd_spp(const RunSpec& spec) {
  const ModelConfig base = spec.model_config();
  std::vector<std::string> variants = spec.list("variants");
  if (variants.empty()) variants = spec.has("norm") ? std::vector<std::string>{spec.str("norm")}
                                                    : std::vector<std::string>{"pre", "res_post"};
  if (spec.has("ckpt") && variants.size() != 1) throw ConfigError("a checkpoint holds a single norm variant");
  const std::uint64_t seed = spec.u64("seed");
  const BlobDataset data(spec.integer("train_size"), seed, spec.task_config());
  const Index batch = spec.integer("spp_batch");
  if (batch < 1 || batch > data.size()) throw ConfigError("spp_batch must be in [1, train_size]");
  std::vector<Index> ids(static_cast<std::size_t>(batch));
  std::iota(ids.begin(), ids.end(), 0);
  const Tensor images = data.images(ids);
  const Index warm = spec.integer("spp_steps");
  if (warm < 0) throw ConfigError("spp_steps must be >= 0");
  const fs::path out = prepare_out(spec);

  auto csv = open_output(out / "spp.csv");
  csv << "block,mean_amp,max_amp,variant\n";
  for (const auto& name : variants) {
    ModelConfig mc = base;
    mc.norm = parse_norm_variant(name);
    Model model = load_model(spec, mc);
    bool diverged = false;
    if (warm > 0) {
      TrainConfig tc = spec.train_config();
      tc.steps = warm;
      tc.warmup = std::min(tc.warmup, warm);
      tc.eval_samples = 1;
      diverged = train(model, data, tc).diverged;
    }
    std::vector<SPPRecord> rows = signal_propagation(model, images);
    if (diverged) {
      for (auto& r : rows) r.flagged = true;
    }
    double lo = INFINITY, hi = 0.0;
    bool flagged = false;
    for (const auto& r : rows) {
      const std::string mean = r.flagged ? "inf" : format_double(r.mean_amp);
      const std::string max = r.flagged ? "inf" : format_double(r.max_amp);
      csv << r.block << ',' << mean << ',' << max << ',' << name << '\n';
      flagged = flagged || r.flagged;
      lo = std::min(lo, r.mean_amp);
      hi = std::max(hi, r.mean_amp);
    }
    std::cout << "variant=" << name << " blocks=" << rows.size()
              << " amplitude_ratio=" << (flagged ? "inf" : format_double(hi / lo)) << "\n";
  }
  return kExitOk;
}

int cmd_bias_export(const RunSpec& spec) {
  const ModelConfig mc = spec.model_config();
  const Model model = load_model(spec, mc);
  const Index blocks = static_cast<Index>(model.blocks().size());
  std::vector<Index> which;
  if (spec.has("block")) {
    const Index b = spec.integer("block");
    if (b < 0 || b >= blocks) {
      throw UsageError("block " + std::to_string(b) + " out of range [0, " + std::to_string(blocks) + ")");
    }
    which.push_back(b);
  } else {
    for (Index b = 0; b < blocks; ++b) which.push_back(b);
  }
  const fs::path out = prepare_out(spec);
  NoGradScope no_grad;
  Index files = 0;
  for (Index b : which) {
    const Block& blk = model.blocks()[static_cast<std::size_t>(b)];
    const Index window = blk.cfg.window;
    const Index heads = blk.bias.heads();
    const Tensor table = blk.bias.kind() == BiasKind::Table
                             ? blk.bias.param_table()->table
                             : cpb_table(*blk.bias.cpb_net(), blk.bias.train_window(), window);
    std::vector<Index> head_ids;
    if (spec.has("head")) {
      const Index h = spec.integer("head");
      if (h < 0 || h >= heads) {
        throw UsageError("head " + std::to_string(h) + " out of range for block " + std::to_string(b) + " with " +
                         std::to_string(heads) + " heads");
      }
      head_ids.push_back(h);
    } else {
      for (Index h = 0; h < heads; ++h) head_ids.push_back(h);
    }
    for (Index h : head_ids) {
      const fs::path file = out / ("bias_block" + std::to_string(b) + "_head" + std::to_string(h) + ".csv");
      auto f = open_output(file);
      write_bias_csv(f, table, window, h);
      ++files;
    }
  }
  std::cout << "wrote " << files << " bias files to " << out.string() << "\n";
  return kExitOk;
}

int cmd_params(const RunSpec& spec) {
  std::vector<ModelConfig> configs;
  if (spec.integer("all") != 0) {
    for (const auto& name : named_config_names()) configs.push_back(named_config(name));
  } else {
    configs.push_back(spec.model_config());
  }
  std::cout << "model,params\n";
  for (const auto& c : configs) std::cout << c.name << ',' << count_params(c) << "\n";
  return kExitOk;
}

int cmd_check(const RunSpec& spec) {
  CheckOptions opts;
  if (spec.has("inject_fault")) {
    if (spec.str("inject_fault") != "tau-floor") {
      throw ConfigError("unknown fault '" + spec.str("inject_fault") + "' (expected tau-floor)");
    }
    opts.injected_tau_floor = 1e-4;
  }
  const auto results = run_checks(spec.list("only"), opts);
  Index failed = 0;
  for (const auto& r : results) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
    if (!r.passed) ++failed;
  }
  std::cout << "checks passed=" << results.size() - static_cast<std::size_t>(failed) << " failed=" << failed << "\n";
  return failed == 0 ? kExitOk : kExitCheckFailed;
}

std::string flag_name(const std::string& key) {
  std::string f = "--" + key;
  std::replace(f.begin(), f.end(), '_', '-');
  return f;
}

void apply_thread_cap() {
  const char* env = std::getenv("SWINLAB_THREADS");
  if (env == nullptr) return;
  const std::string s(env);
  int n = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), n);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || n < 1) {
    throw ConfigError("SWINLAB_THREADS must be a positive integer, got '" + s + "'");
  }
  Eigen::setNbThreads(n);
}

}  // namespace

std::string format_ratio_line(Index train_window, Index target_window) {
  return "linear=" + fixed(extrapolation_ratio(train_window, target_window, Spacing::Linear), 2) +
         " log=" + fixed(extrapolation_ratio(train_window, target_window, Spacing::Log), 2);
}

void write_bias_csv(std::ostream& out, const Tensor& table, Index window, Index head) {
  const Index side = 2 * window - 1;
  if (table.rank() != 2 || table.dim(0) != side * side || head < 0 || head >= table.dim(1)) {
    throw DimensionError("bias table " + to_string(table.shape()) + " does not fit window " + std::to_string(window) +
                         " head " + std::to_string(head));
  }
  const Index heads = table.dim(1);
  out << "head,dx,dy,value\n";
  for (Index r = 0; r < side; ++r)
    for (Index c = 0; c < side; ++c) {
      out << head << ',' << c - (window - 1) << ',' << r - (window - 1) << ','
          << format_double(table[(r * side + c) * heads + head]) << '\n';
    }
}

std::vector<BiasRow> read_bias_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "head,dx,dy,value") throw FormatError("bias CSV header missing");
  std::vector<BiasRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    BiasRow row;
    const char* p = line.data();
    const char* end = line.data() + line.size();
    auto field = [&](auto& value, bool last) {
      const auto res = std::from_chars(p, end, value);
      if (res.ec != std::errc() || (last ? res.ptr != end : (res.ptr == end || *res.ptr != ','))) {
        throw FormatError("malformed bias CSV row '" + line + "'");
      }
      p = last ? res.ptr : res.ptr + 1;
    };
    field(row.head, false);
    field(row.dx, false);
    field(row.dy, false);
    field(row.value, true);
    rows.push_back(row);
  }
  return rows;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Shifted-window vision transformer lab"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every command");

  std::map<std::string, std::string> overrides;
  std::string config_path;
  std::vector<std::pair<CLI::App*, std::string>> commands;

  auto add_command = [&](CLI::App* sub, const std::string& name) {
    sub->add_option("--config", config_path, "key = value config file");
    for (const auto& key : spec_keys()) sub->add_option(flag_name(key.name), overrides[key.name], key.help);
    commands.emplace_back(sub, name);
  };
  add_command(app.add_subcommand("train", "Train a model on the synthetic task"), "train");
  add_command(app.add_subcommand("transfer", "Evaluate a checkpoint at a new window size"), "transfer");
  add_command(app.add_subcommand("spp", "Per-block main-branch amplitudes"), "spp");
  CLI::App* bias = app.add_subcommand("bias", "Position-bias tools");
  bias->require_subcommand(1);
  add_command(bias->add_subcommand("export", "Write bias tables as CSV"), "bias-export");
  add_command(app.add_subcommand("params", "Parameter counts"), "params");
  add_command(app.add_subcommand("check", "Run the property suites"), "check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    apply_thread_cap();
    for (const auto& [sub, name] : commands) {
      if (!sub->parsed()) continue;
      RunSpec spec;
      if (!config_path.empty()) spec.load_file(config_path);
      for (const auto& key : spec_keys()) {
        if (sub->get_option(flag_name(key.name))->count() > 0) spec.set(key.name, overrides[key.name]);
      }
      if (name == "train") return cmd_train(spec);
      if (name == "transfer") return cmd_transfer(spec);
      if (name == "spp") return cmd_spp(spec);
      if (name == "bias-export") return cmd_bias_export(spec);
      if (name == "params") return cmd_params(spec);
      if (name == "check") return cmd_check(spec);
    }
  } catch (const std::exception& e) {
    std::cerr << "swinlab: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace swinlab
