#include "swinlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "swinlab/ops.hpp"
#include "swinlab/window.hpp"

namespace swinlab {

std::string to_string(NormVariant v) {
  switch (v) {
    case NormVariant::Pre:
      return "pre";
    case NormVariant::Post:
      return "post";
    case NormVariant::Sandwich:
      return "sandwich";
    case NormVariant::ResPost:
      return "res_post";
  }
  return "?";
}

NormVariant parse_norm_variant(const std::string& name) {
  if (name == "pre") return NormVariant::Pre;
  if (name == "post") return NormVariant::Post;
  if (name == "sandwich") return NormVariant::Sandwich;
  if (name == "res_post") return NormVariant::ResPost;
  throw ConfigError("unknown norm variant '" + name + "' (expected pre, post, sandwich or res_post)");
}

// --- configs ----------------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (image_size < 1 || in_channels < 1 || patch < 1 || embed_dim < 1) fail("sizes must be positive");
  if (image_size % patch != 0) {
    throw GeometryError("image size " + std::to_string(image_size) + " is not divisible by patch " +
                        std::to_string(patch));
  }
  if (image_size / patch % 8 != 0) {
    throw GeometryError("patch grid " + std::to_string(image_size / patch) + " must be divisible by 8 for 3 merges");
  }
  if (window < 1) fail("window must be >= 1");
  if (pretrained_window < 0) fail("pretrained_window must be >= 0");
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (mlp_ratio <= 0.0) fail("mlp_ratio must be positive");
  if (total_blocks() < 1) fail("at least one block is required");
  for (int s = 0; s < 4; ++s) {
    if (depths[s] < 0) fail("negative depth");
    if (heads[s] < 1) fail("heads must be >= 1");
    const Index c = embed_dim << s;
    if (c % heads[s] != 0) {
      fail("stage " + std::to_string(s) + " channels " + std::to_string(c) + " not divisible by heads " +
           std::to_string(heads[s]));
    }
  }
  if (extra_ln_period && *extra_ln_period < 1) fail("extra_ln_period must be >= 1");
  if (bias != BiasKind::Table && cpb_hidden < 1) fail("cpb_hidden must be >= 1");
  if (sequential_stages < 0 || sequential_stages > 4) fail("sequential_stages must be in [0, 4]");
  if (tau_min <= 0.0) fail("tau_min must be positive");
}

namespace {

ModelConfig paper_config(const std::string& name, Index c, std::array<Index, 4> depths) {
  ModelConfig cfg;
  cfg.name = name;
  cfg.image_size = 256;
  cfg.embed_dim = c;
  cfg.depths = depths;
  for (int s = 0; s < 4; ++s) cfg.heads[s] = (c << s) / 32;
  cfg.window = 8;
  cfg.num_classes = 1000;
  cfg.cpb_hidden = 512;
  return cfg;
}

}  // namespace

ModelConfig named_config(const std::string& name) {
  if (name == "desk-T") return ModelConfig{};
  if (name == "T") return paper_config(name, 96, {2, 2, 6, 2});
  if (name == "S") return paper_config(name, 96, {2, 2, 18, 2});
  if (name == "B") return paper_config(name, 128, {2, 2, 18, 2});
  if (name == "L") return paper_config(name, 192, {2, 2, 18, 2});
  if (name == "H") return paper_config(name, 352, {2, 2, 18, 2});
  if (name == "G") {
    ModelConfig cfg = paper_config(name, 512, {2, 2, 42, 4});
    cfg.extra_ln_period = 6;
    return cfg;
  }
  throw ConfigError("unknown model '" + name + "' (expected desk-T, T, S, B, L, H or G)");
}

std::vector<std::string> named_config_names() { return {"desk-T", "T", "S", "B", "L", "H", "G"}; }

std::vector<StageGeometry> stage_geometry(const ModelConfig& cfg) {
  std::vector<StageGeometry> out(4);
  const Index train = cfg.pretrained_window > 0 ? cfg.pretrained_window : cfg.window;
  for (int s = 0; s < 4; ++s) {
    StageGeometry& g = out[s];
    g.resolution = cfg.image_size / cfg.patch >> s;
    g.channels = cfg.embed_dim << s;
    g.heads = cfg.heads[s];
    g.window = std::min(cfg.window, g.resolution);
    g.shift = g.resolution <= cfg.window ? 0 : g.window / 2;
    g.train_window = std::min(train, g.resolution);
  }
  return out;
}

// --- layers -----------------------------------------------------------------

Linear Linear::make(Index in, Index out, bool with_bias, std::mt19937_64& rng) {
  Linear l;
  l.weight = Tensor::zeros({in, out}, true);
  fill_truncated_normal(l.weight, rng, 0.02);
  if (with_bias) l.bias = Tensor::zeros({out}, true);
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  const Tensor y = matmul(x, weight);
  return bias.defined() ? y + bias : y;
}

void Linear::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

LayerNormParams LayerNormParams::make(Index channels) {
  return LayerNormParams{Tensor::full({channels}, 1.0, true), Tensor::zeros({channels}, true)};
}

Tensor LayerNormParams::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

void LayerNormParams::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".weight", gamma);
  out.emplace_back(prefix + ".bias", beta);
}

// --- block ------------------------------------------------------------------

void BlockConfig::validate() const {
  if (resolution < 1 || window < 1) throw ConfigError("block needs positive resolution and window");
  if (shift < 0 || shift >= window) {
    throw GeometryError("block shift " + std::to_string(shift) + " must be in [0, " + std::to_string(window) + ")");
  }
  if (mlp_ratio <= 0.0) throw ConfigError("mlp_ratio must be positive");
}

Block Block::make(const BlockConfig& cfg, Index channels, const BiasProvider& bias, std::mt19937_64& rng) {
  cfg.validate();
  if (cfg.attention.heads * cfg.attention.head_dim != channels) {
    throw ConfigError("heads * head_dim must equal the block channels");
  }
  Block b;
  b.cfg = cfg;
  b.norm1 = LayerNormParams::make(channels);
  b.norm2 = LayerNormParams::make(channels);
  if (cfg.norm == NormVariant::ResPost) {
    b.norm1.gamma = Tensor::full({channels}, cfg.res_post_gain, true);
    b.norm2.gamma = Tensor::full({channels}, cfg.res_post_gain, true);
  }
  if (cfg.norm == NormVariant::Sandwich) {
    b.norm1_post = LayerNormParams::make(channels);
    b.norm2_post = LayerNormParams::make(channels);
  }
  b.attn = AttentionWeights::make(channels, cfg.attention, rng);
  b.bias = bias;
  const auto hidden = static_cast<Index>(static_cast<double>(channels) * cfg.mlp_ratio);
  b.fc1 = Linear::make(channels, hidden, true, rng);
  b.fc2 = Linear::make(hidden, channels, true, rng);
  if (cfg.shift > 0) {
    const Index padded = padded_extent(cfg.resolution, cfg.window);
    b.mask = shift_attention_mask(padded, padded, cfg.window, cfg.shift);
  }
  return b;
}

Tensor Block::attention_branch(const Tensor& x, AttentionTrace* trace) const {
  const Index batch = x.dim(0), c = x.dim(2);
  const Index r = cfg.resolution, m = cfg.window;
  if (x.dim(1) != r * r) {
    throw DimensionError("block expects " + std::to_string(r * r) + " tokens, got " + std::to_string(x.dim(1)));
  }
  const Index padded = padded_extent(r, m);
  Tensor h = reshape(x, {batch, r, r, c});
  if (padded != r) h = pad_bottom_right(h, padded, padded);
  if (cfg.shift > 0) h = cyclic_shift(h, cfg.shift);
  const Tensor out = attend(window_partition(h, m), attn, cfg.attention, bias.bias(m), mask, trace);
  h = window_reverse(out, m, padded, padded);
  if (cfg.shift > 0) h = cyclic_shift(h, -cfg.shift);
  if (padded != r) h = crop_top_left(h, r, r);
  return reshape(h, {batch, r * r, c});
}

Tensor Block::mlp_branch(const Tensor& x) const { return fc2(gelu(fc1(x))); }

void Block::collect(const std::string& prefix, NamedTensors& out) const {
  norm1.collect(prefix + ".norm1", out);
  if (norm1_post.gamma.defined()) norm1_post.collect(prefix + ".norm1_post", out);
  for (const auto& [name, t] : attn.parameters()) out.emplace_back(prefix + ".attn." + name, t);
  for (const auto& [name, t] : bias.parameters()) out.emplace_back(prefix + ".attn." + name, t);
  norm2.collect(prefix + ".norm2", out);
  if (norm2_post.gamma.defined()) norm2_post.collect(prefix + ".norm2_post", out);
  fc1.collect(prefix + ".mlp.fc1", out);
  fc2.collect(prefix + ".mlp.fc2", out);
}

Tensor block_forward(const Tensor& x, const Block& b) {
  switch (b.cfg.norm) {
    case NormVariant::ResPost: {
      const Tensor y = x + b.norm1(b.attention_branch(x));
      return y + b.norm2(b.mlp_branch(y));
    }
    case NormVariant::Pre: {
      const Tensor y = x + b.attention_branch(b.norm1(x));
      return y + b.mlp_branch(b.norm2(y));
    }
    case NormVariant::Post: {
      const Tensor y = b.norm1(x + b.attention_branch(x));
      return b.norm2(y + b.mlp_branch(y));
    }
    case NormVariant::Sandwich: {
      const Tensor y = x + b.norm1_post(b.attention_branch(b.norm1(x)));
      return y + b.norm2_post(b.mlp_branch(b.norm2(y)));
    }
  }
  throw ConfigError("unknown norm variant");
}

// --- embedding and merging --------------------------------------------------

Tensor patchify(const Tensor& images, Index patch) {
  if (images.rank() != 4) throw DimensionError("images must be [B, h, w, c], got " + to_string(images.shape()));
  const Index b = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  if (patch < 1 || h % patch != 0 || w % patch != 0) {
    throw GeometryError("image " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by patch " +
                        std::to_string(patch));
  }
  const Index gh = h / patch, gw = w / patch, feat = patch * patch * c;
  std::vector<Index> idx(static_cast<std::size_t>(b * gh * gw * feat));
  std::size_t k = 0;
  for (Index n = 0; n < b; ++n)
    for (Index py = 0; py < gh; ++py)
      for (Index px = 0; px < gw; ++px)
        for (Index y = 0; y < patch; ++y)
          for (Index x = 0; x < patch; ++x)
            for (Index ch = 0; ch < c; ++ch)
              idx[k++] = ((n * h + py * patch + y) * w + px * patch + x) * c + ch;
  return gather(images, make_index_map(std::move(idx)), {b, gh * gw, feat});
}

Tensor PatchEmbed::project(const Tensor& images) const { return proj(patchify(images, patch)); }

Tensor patch_embed(const Tensor& images, const PatchEmbed& embed) { return embed.norm(embed.project(images)); }

Tensor merge_neighbors(const Tensor& x, Index height, Index width) {
  if (x.rank() != 3 || x.dim(1) != height * width) {
    throw DimensionError("merge expects [B, " + std::to_string(height * width) + ", C], got " + to_string(x.shape()));
  }
  if (height % 2 != 0 || width % 2 != 0) {
    throw GeometryError("patch merge needs even extents, got " + std::to_string(height) + "x" + std::to_string(width));
  }
  const Index b = x.dim(0), c = x.dim(2), oh = height / 2, ow = width / 2;
  constexpr Index kOffsets[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};  // (row, col)
  std::vector<Index> idx(static_cast<std::size_t>(b * oh * ow * 4 * c));
  std::size_t k = 0;
  for (Index n = 0; n < b; ++n)
    for (Index y = 0; y < oh; ++y)
      for (Index xx = 0; xx < ow; ++xx)
        for (const auto& off : kOffsets)
          for (Index ch = 0; ch < c; ++ch)
            idx[k++] = ((n * height + 2 * y + off[0]) * width + 2 * xx + off[1]) * c + ch;
  return gather(x, make_index_map(std::move(idx)), {b, oh * ow, 4 * c});
}

Tensor patch_merge(const Tensor& x, const PatchMerge& merge) {
  return merge.reduction(merge.norm(merge_neighbors(x, merge.resolution, merge.resolution)));
}

// --- model ------------------------------------------------------------------

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  geometry_ = stage_geometry(cfg_);
  std::mt19937_64 rng(seed);

  const Index c0 = cfg_.embed_dim;
  embed_.patch = cfg_.patch;
  embed_.proj = Linear::make(cfg_.patch * cfg_.patch * cfg_.in_channels, c0, true, rng);
  embed_.norm = LayerNormParams::make(c0);

  Index global = 0;
  for (int s = 0; s < 4; ++s) {
    const StageGeometry& g = geometry_[s];
    if (s > 0) {
      merges_.push_back(PatchMerge{geometry_[s - 1].resolution, LayerNormParams::make(2 * g.channels),
                                   Linear::make(2 * g.channels, g.channels, false, rng)});
      units_.push_back({Unit::Kind::Merge, static_cast<Index>(merges_.size()) - 1});
    }
    for (Index j = 0; j < cfg_.depths[s]; ++j) {
      BlockConfig bc;
      bc.norm = cfg_.norm;
      bc.attention.heads = g.heads;
      bc.attention.head_dim = g.channels / g.heads;
      bc.attention.variant = cfg_.attention;
      bc.attention.tau_init = cfg_.tau_init;
      bc.attention.tau_min = cfg_.tau_min;
      bc.attention.sequential = s < cfg_.sequential_stages;
      bc.mlp_ratio = cfg_.mlp_ratio;
      bc.res_post_gain = cfg_.res_post_gain;
      bc.resolution = g.resolution;
      bc.window = g.window;
      bc.shift = j % 2 == 1 ? g.shift : 0;
      const BiasProvider bias =
          cfg_.bias == BiasKind::Table
              ? BiasProvider::table(g.window, g.heads, rng)
              : BiasProvider::cpb(cfg_.bias, g.train_window, g.heads, cfg_.cpb_hidden, rng,
                                  g.train_window > 1 ? cfg_.cpb_normalization : CoordNormalization::None);
      blocks_.push_back(Block::make(bc, g.channels, bias, rng));
      block_stage_.push_back(s);
      block_in_stage_.push_back(j);
      units_.push_back({Unit::Kind::Block, static_cast<Index>(blocks_.size()) - 1});
      ++global;
      const Index count = cfg_.extra_ln_scope == ExtraNormScope::Global ? global : j + 1;
      if (cfg_.extra_ln_period && count % *cfg_.extra_ln_period == 0) {
        extra_norms_.push_back(LayerNormParams::make(g.channels));
        extra_norm_stage_.push_back(s);
        units_.push_back({Unit::Kind::ExtraNorm, static_cast<Index>(extra_norms_.size()) - 1});
      }
    }
  }
  final_norm_ = LayerNormParams::make(geometry_[3].channels);
  head_ = Linear::make(geometry_[3].channels, cfg_.num_classes, true, rng);
}

std::string Model::block_prefix(Index block) const {
  return "layers." + std::to_string(block_stage_.at(static_cast<std::size_t>(block))) + ".blocks." +
         std::to_string(block_in_stage_.at(static_cast<std::size_t>(block)));
}

Tensor Model::run_unit(const Unit& u, const Tensor& x) const {
  switch (u.kind) {
    case Unit::Kind::Block:
      try {
        return block_forward(x, blocks_[static_cast<std::size_t>(u.index)]);
      } catch (const NumericError& e) {
        throw NumericError(e.op(), "block " + std::to_string(u.index) + " (" + block_prefix(u.index) + "): " + e.what());
      }
    case Unit::Kind::Merge:
      return patch_merge(x, merges_[static_cast<std::size_t>(u.index)]);
    case Unit::Kind::ExtraNorm:
      return extra_norms_[static_cast<std::size_t>(u.index)](x);
  }
  return x;
}

Tensor Model::forward(const Tensor& images, const ForwardOptions& opts) const {
  if (images.rank() != 4 || images.dim(1) != cfg_.image_size || images.dim(2) != cfg_.image_size ||
      images.dim(3) != cfg_.in_channels) {
    throw DimensionError("model expects [B, " + std::to_string(cfg_.image_size) + ", " +
                         std::to_string(cfg_.image_size) + ", " + std::to_string(cfg_.in_channels) + "], got " +
                         to_string(images.shape()));
  }
  Tensor x = patch_embed(images, embed_);
  const Index seg = opts.checkpoint_segment;
  const bool segmented = seg > 0 && seg < cfg_.total_blocks() && opts.spp == nullptr;

  if (!segmented) {
    for (const Unit& u : units_) {
      x = run_unit(u, x);
      if (opts.spp && u.kind == Unit::Kind::Block) {
        const auto v = x.values();
        double sum = 0.0, mx = 0.0;
        for (double e : v) {
          sum += std::abs(e);
          mx = std::max(mx, std::abs(e));
        }
        opts.spp->push_back(SPPRecord{u.index, sum / static_cast<double>(v.size()), mx, false});
      }
    }
  } else {
    // Segments close after every `seg` blocks; merges and extra norms ride
    // along with the segment they fall into.
    std::size_t i = 0;
    while (i < units_.size()) {
      std::size_t j = i;
      Index blocks = 0;
      while (j < units_.size() && blocks < seg) {
        if (units_[j].kind == Unit::Kind::Block) ++blocks;
        ++j;
      }
      while (j < units_.size() && units_[j].kind == Unit::Kind::ExtraNorm) ++j;
      const std::vector<Unit> part(units_.begin() + static_cast<std::ptrdiff_t>(i),
                                   units_.begin() + static_cast<std::ptrdiff_t>(j));
      x = recompute(
          [this, part](const Tensor& in) {
            Tensor h = in;
            for (const Unit& u : part) h = run_unit(u, h);
            return h;
          },
          x);
      i = j;
    }
  }
  return head_(mean_dim(final_norm_(x), 1));
}

NamedTensors Model::parameters() const {
  NamedTensors out;
  embed_.proj.collect("patch_embed.proj", out);
  embed_.norm.collect("patch_embed.norm", out);
  for (const Unit& u : units_) {
    const auto k = static_cast<std::size_t>(u.index);
    switch (u.kind) {
      case Unit::Kind::Block:
        blocks_[k].collect(block_prefix(u.index), out);
        break;
      case Unit::Kind::Merge:
        merges_[k].norm.collect("layers." + std::to_string(k) + ".downsample.norm", out);
        merges_[k].reduction.collect("layers." + std::to_string(k) + ".downsample.reduction", out);
        break;
      case Unit::Kind::ExtraNorm:
        extra_norms_[k].collect("extra_norms." + std::to_string(k), out);
        break;
    }
  }
  final_norm_.collect("norm", out);
  head_.collect("head", out);
  return out;
}

Index Model::parameter_count() const {
  Index n = 0;
  for (const auto& [name, t] : parameters()) n += t.numel();
  return n;
}

Index count_params(const ModelConfig& cfg) {
  cfg.validate();
  const auto geo = stage_geometry(cfg);
  auto ln = [](Index c) { return 2 * c; };
  auto linear = [](Index in, Index out, bool bias) { return in * out + (bias ? out : 0); };
  const Index c0 = cfg.embed_dim;
  Index total = linear(cfg.patch * cfg.patch * cfg.in_channels, c0, true) + ln(c0);
  Index global = 0;
  for (int s = 0; s < 4; ++s) {
    const StageGeometry& g = geo[s];
    const Index c = g.channels;
    if (s > 0) total += ln(2 * c) + linear(2 * c, c, false);
    for (Index j = 0; j < cfg.depths[s]; ++j) {
      total += (cfg.norm == NormVariant::Sandwich ? 4 : 2) * ln(c);
      total += linear(c, 3 * c, true) + linear(c, c, true);
      if (cfg.attention == AttentionVariant::Cosine) total += g.heads;
      if (cfg.bias == BiasKind::Table) {
        total += (2 * g.window - 1) * (2 * g.window - 1) * g.heads;
      } else {
        total += linear(2, cfg.cpb_hidden, true) + linear(cfg.cpb_hidden, g.heads, true);
      }
      const auto hidden = static_cast<Index>(static_cast<double>(c) * cfg.mlp_ratio);
      total += linear(c, hidden, true) + linear(hidden, c, true);
      ++global;
      const Index count = cfg.extra_ln_scope == ExtraNormScope::Global ? global : j + 1;
      if (cfg.extra_ln_period && count % *cfg.extra_ln_period == 0) total += ln(c);
    }
  }
  const Index cl = geo[3].channels;
  return total + ln(cl) + linear(cl, cfg.num_classes, true);
}

std::vector<SPPRecord> signal_propagation(const Model& model, const Tensor& batch) {
  NoGradScope no_grad;
  std::vector<SPPRecord> records;
  ForwardOptions opts;
  opts.spp = &records;
  try {
    model.forward(batch, opts);
  } catch (const NumericError&) {
    const double inf = std::numeric_limits<double>::infinity();
    for (auto b = static_cast<Index>(records.size()); b < model.config().total_blocks(); ++b) {
      records.push_back(SPPRecord{b, inf, inf, true});
    }
  }
  return records;
}

bool decays(const std::string& name, const Tensor& param) {
  constexpr std::string_view suffix = ".weight";
  return param.rank() >= 2 && name.size() >= suffix.size() &&
         name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace swinlab
