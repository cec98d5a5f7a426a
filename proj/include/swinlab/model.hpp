#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "swinlab/attention.hpp"
#include "swinlab/position_bias.hpp"
#include "swinlab/tensor.hpp"

namespace swinlab {

enum class NormVariant { Pre, Post, Sandwich, ResPost };

std::string to_string(NormVariant v);
NormVariant parse_norm_variant(const std::string& name);

/// Whether the periodic main-branch LayerNorm counts blocks across the whole
/// model or restarts in every stage.
enum class ExtraNormScope { Global, Stage };

struct ModelConfig {
  std::string name = "desk-T";
  Index image_size = 64;
  Index in_channels = 3;
  Index patch = 4;
  Index embed_dim = 32;
  std::array<Index, 4> depths{1, 1, 2, 1};
  std::array<Index, 4> heads{1, 2, 4, 8};
  Index window = 4;
  /// Window the model was trained at; continuous bias inputs are normalized
  /// by it. 0 means "same as window".
  Index pretrained_window = 0;
  Index num_classes = 8;
  double mlp_ratio = 4.0;
  NormVariant norm = NormVariant::ResPost;
  AttentionVariant attention = AttentionVariant::Cosine;
  BiasKind bias = BiasKind::LogCPB;
  Index cpb_hidden = 64;
  CoordNormalization cpb_normalization = CoordNormalization::TrainWindow;
  std::optional<Index> extra_ln_period;
  ExtraNormScope extra_ln_scope = ExtraNormScope::Global;
  /// The first `sequential_stages` stages evaluate attention window by window.
  Index sequential_stages = 0;
  double tau_init = 1.0;
  double tau_min = 0.01;
  /// Initial LayerNorm gain on res-post branch outputs; 0 starts every block
  /// as the identity.
  double res_post_gain = 0.0;

  void validate() const;
  Index total_blocks() const { return depths[0] + depths[1] + depths[2] + depths[3]; }
};

/// desk-T, T, S, B, L, H, G.
ModelConfig named_config(const std::string& name);
std::vector<std::string> named_config_names();

/// Derived per-stage geometry. Stages whose feature map is no larger than the
/// window use a single unshifted window covering the map.
struct StageGeometry {
  Index resolution = 0;
  Index channels = 0;
  Index heads = 0;
  Index window = 0;
  Index shift = 0;  // applied to odd-indexed blocks
  Index train_window = 0;
};

std::vector<StageGeometry> stage_geometry(const ModelConfig& cfg);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out] or undefined

  static Linear make(Index in, Index out, bool with_bias, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  static LayerNormParams make(Index channels);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct BlockConfig {
  NormVariant norm = NormVariant::ResPost;
  AttentionConfig attention;
  double mlp_ratio = 4.0;
  double res_post_gain = 0.0;
  Index resolution = 0;  // feature map is resolution x resolution
  Index window = 0;
  Index shift = 0;

  void validate() const;
};

struct Block {
  BlockConfig cfg;
  LayerNormParams norm1;
  LayerNormParams norm2;
  LayerNormParams norm1_post;  // sandwich only
  LayerNormParams norm2_post;  // sandwich only
  AttentionWeights attn;
  BiasProvider bias;
  Linear fc1;
  Linear fc2;
  Tensor mask;  // [nW, M^2, M^2] when shifted

  static Block make(const BlockConfig& cfg, Index channels, const BiasProvider& bias, std::mt19937_64& rng);
  /// Windowed attention sub-layer on [B, L, C], including shift/pad handling.
  Tensor attention_branch(const Tensor& x, AttentionTrace* trace = nullptr) const;
  Tensor mlp_branch(const Tensor& x) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// One transformer block on [B, H*W, C] with the configured norm placement.
Tensor block_forward(const Tensor& x, const Block& block);

/// [B, h, w, c] -> [B, (h/p)(w/p), p*p*c], each patch flattened as (py, px, c).
Tensor patchify(const Tensor& images, Index patch);

struct PatchEmbed {
  Index patch = 4;
  Linear proj;
  LayerNormParams norm;

  /// Linear projection of the patches, before normalization.
  Tensor project(const Tensor& images) const;
};

Tensor patch_embed(const Tensor& images, const PatchEmbed& embed);

/// [B, H*W, C] -> [B, H/2*W/2, 4C], neighbors ordered (0,0), (1,0), (0,1), (1,1).
Tensor merge_neighbors(const Tensor& x, Index height, Index width);

struct PatchMerge {
  Index resolution = 0;
  LayerNormParams norm;  // over 4C
  Linear reduction;      // 4C -> 2C, no bias
};

Tensor patch_merge(const Tensor& x, const PatchMerge& merge);

/// Per-block main-branch amplitude statistics.
struct SPPRecord {
  Index block = 0;
  double mean_amp = 0.0;
  double max_amp = 0.0;
  bool flagged = false;
};

struct ForwardOptions {
  /// Blocks per recompute segment; 0 (or >= total blocks) disables checkpointing.
  Index checkpoint_segment = 0;
  std::vector<SPPRecord>* spp = nullptr;
};

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<StageGeometry>& geometry() const { return geometry_; }

  /// images [B, h, w, c] -> logits [B, classes].
  Tensor forward(const Tensor& images, const ForwardOptions& opts = {}) const;

  /// Every parameter with a fully-qualified name, in a fixed order.
  NamedTensors parameters() const;
  Index parameter_count() const;

  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  /// Stage index of each block.
  const std::vector<Index>& block_stage() const { return block_stage_; }
  std::string block_prefix(Index block) const;

 private:
  struct Unit {
    enum class Kind { Block, Merge, ExtraNorm } kind;
    Index index;
  };

  Tensor run_unit(const Unit& u, const Tensor& x) const;

  ModelConfig cfg_;
  std::vector<StageGeometry> geometry_;
  PatchEmbed embed_;
  std::vector<Block> blocks_;
  std::vector<Index> block_stage_;
  std::vector<Index> block_in_stage_;
  std::vector<PatchMerge> merges_;
  std::vector<LayerNormParams> extra_norms_;
  std::vector<Index> extra_norm_stage_;
  std::vector<Unit> units_;
  LayerNormParams final_norm_;
  Linear head_;
};

/// Parameter count from shapes alone.
Index count_params(const ModelConfig& cfg);

/// Per-block amplitudes under a no-grad forward. A non-finite activation
/// flags that block and every later one instead of throwing.
std::vector<SPPRecord> signal_propagation(const Model& model, const Tensor& batch);

/// Whether AdamW should decay this parameter (matrices named *.weight).
bool decays(const std::string& name, const Tensor& param);

}  // namespace swinlab
