#include "swinlab/run_spec.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace swinlab {

const std::vector<SpecKey>& spec_keys() {
  static const std::vector<SpecKey> keys = {
      {"model", "desk-T", "named model: desk-T, T, S, B, L, H, G"},
      {"norm", "", "norm placement: pre, post, sandwich, res_post"},
      {"attn", "", "attention: dot, cosine"},
      {"bias", "", "position bias: table, lin_cpb, log_cpb"},
      {"window", "", "window size M"},
      {"depth", "", "total block count (reshapes the stage depths)"},
      {"image_size", "", "input side length in pixels"},
      {"cpb_hidden", "", "continuous-bias MLP width"},
      {"normalize", "", "continuous-bias coordinate scaling: none, train_window"},
      {"extra_ln_period", "", "extra main-branch LayerNorm every N blocks (0 disables)"},
      {"extra_ln_scope", "", "extra LayerNorm block counting: global, stage"},
      {"sequential_stages", "", "leading stages that evaluate attention window by window"},
      {"res_post_gain", "", "initial gain of res-post branch LayerNorms"},
      {"seed", "0", "random seed"},
      {"steps", "200", "training steps"},
      {"batch", "16", "batch size"},
      {"lr", "0.001", "peak learning rate"},
      {"warmup", "20", "linear warm-up steps"},
      {"weight_decay", "0.05", "decoupled weight decay"},
      {"clip", "5", "gradient clipping max norm"},
      {"segment", "0", "blocks per activation-checkpoint segment (0 disables)"},
      {"train_size", "1024", "training samples"},
      {"test_size", "256", "held-out samples"},
      {"max_scale", "2", "largest object scale in training samples"},
      {"target_window", "", "window after transfer (default 2 x window)"},
      {"target_image_size", "", "input size after transfer (default scales with the window)"},
      {"finetune_steps", "0", "fine-tuning steps after transfer"},
      {"ckpt", "", "checkpoint file"},
      {"init", "", "random: start from a fresh model instead of a checkpoint"},
      {"out", "out", "output directory"},
      {"variants", "", "comma-separated norm variants for spp"},
      {"spp_steps", "0", "training steps before measuring amplitudes"},
      {"spp_batch", "8", "images used for amplitude statistics"},
      {"block", "", "block index for bias export (default all)"},
      {"head", "", "head index for bias export (default all)"},
      {"only", "", "comma-separated check names"},
      {"inject_fault", "", "test hook: tau-floor"},
      {"all", "0", "params: list every named model"},
  };
  return keys;
}

RunSpec::RunSpec() {
  for (const auto& k : spec_keys()) values_[k.name] = k.default_value;
}

void RunSpec::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
  it->second = value;
}

void RunSpec::load_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  load_text(ss.str(), path.string());
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunSpec::load_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    try {
      set(key, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

bool RunSpec::has(const std::string& key) const { return !str(key).empty(); }

const std::string& RunSpec::str(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
  return it->second;
}

std::int64_t RunSpec::integer(const std::string& key) const {
  const std::string& s = str(key);
  std::int64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError(key + ": expected an integer, got '" + s + "'");
  }
  return v;
}

std::uint64_t RunSpec::u64(const std::string& key) const {
  const std::string& s = str(key);
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError(key + ": expected an unsigned integer, got '" + s + "'");
  }
  return v;
}

double RunSpec::real(const std::string& key) const {
  const std::string& s = str(key);
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  }
  return v;
}

std::optional<std::int64_t> RunSpec::opt_integer(const std::string& key) const {
  if (!has(key)) return std::nullopt;
  return integer(key);
}

std::vector<std::string> RunSpec::list(const std::string& key) const {
  std::vector<std::string> out;
  std::istringstream in(str(key));
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string RunSpec::echo() const {
  std::string out;
  for (const auto& k : spec_keys()) out += k.name + " = " + values_.at(k.name) + "\n";
  return out;
}

std::array<Index, 4> depths_for(Index blocks) {
  if (blocks < 1) throw ConfigError("depth must be >= 1");
  if (blocks >= 4) return {1, 1, blocks - 3, 1};
  std::array<Index, 4> d{0, 0, 0, 0};
  for (Index s = 0; s < blocks; ++s) d[static_cast<std::size_t>(s)] = 1;
  return d;
}

ModelConfig RunSpec::model_config() const {
  ModelConfig cfg = named_config(str("model"));
  if (has("norm")) cfg.norm = parse_norm_variant(str("norm"));
  if (has("attn")) cfg.attention = parse_attention_variant(str("attn"));
  if (has("bias")) cfg.bias = parse_bias_kind(str("bias"));
  if (has("window")) cfg.window = integer("window");
  if (has("depth")) cfg.depths = depths_for(integer("depth"));
  if (has("image_size")) cfg.image_size = integer("image_size");
  if (has("cpb_hidden")) cfg.cpb_hidden = integer("cpb_hidden");
  if (has("normalize")) {
    const std::string& n = str("normalize");
    if (n == "none") {
      cfg.cpb_normalization = CoordNormalization::None;
    } else if (n == "train_window") {
      cfg.cpb_normalization = CoordNormalization::TrainWindow;
    } else {
      throw ConfigError("normalize: expected none or train_window, got '" + n + "'");
    }
  }
  if (has("extra_ln_period")) {
    const auto p = integer("extra_ln_period");
    cfg.extra_ln_period = p > 0 ? std::optional<Index>(p) : std::nullopt;
  }
  if (has("extra_ln_scope")) {
    const std::string& s = str("extra_ln_scope");
    if (s == "global") {
      cfg.extra_ln_scope = ExtraNormScope::Global;
    } else if (s == "stage") {
      cfg.extra_ln_scope = ExtraNormScope::Stage;
    } else {
      throw ConfigError("extra_ln_scope: expected global or stage, got '" + s + "'");
    }
  }
  if (has("sequential_stages")) cfg.sequential_stages = integer("sequential_stages");
  if (has("res_post_gain")) cfg.res_post_gain = real("res_post_gain");
  cfg.validate();
  return cfg;
}

TrainConfig RunSpec::train_config() const {
  TrainConfig tc;
  tc.steps = integer("steps");
  tc.batch = integer("batch");
  tc.warmup = integer("warmup");
  tc.lr = real("lr");
  tc.weight_decay = real("weight_decay");
  tc.clip = real("clip");
  tc.checkpoint_segment = integer("segment");
  tc.seed = u64("seed");
  if (tc.steps < 0 || tc.batch < 1 || tc.warmup < 0 || tc.lr < 0.0 || tc.clip <= 0.0 || tc.checkpoint_segment < 0) {
    throw ConfigError("training settings out of range");
  }
  return tc;
}

BlobTaskConfig RunSpec::task_config() const {
  BlobTaskConfig t;
  t.image_size = model_config().image_size;
  t.max_scale = real("max_scale");
  if (t.max_scale < 1.0) throw ConfigError("max_scale must be >= 1");
  return t;
}

}  // namespace swinlab
