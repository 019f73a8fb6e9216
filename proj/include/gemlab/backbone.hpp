#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gemlab/config_text.hpp"
#include "gemlab/geometry.hpp"
#include "gemlab/instrumentation.hpp"
#include "gemlab/latent.hpp"
#include "gemlab/param_store.hpp"
#include "gemlab/tensor.hpp"

namespace gemlab {

/// Miniature point transformer: embedding, learned positional MLP, `blocks`
/// pre-norm blocks of patch attention + FFN, final norm and linear head.
struct BackboneConfig {
  std::size_t in_channels = 6;
  std::size_t width = 64;
  std::size_t blocks = 8;
  std::size_t heads = 4;
  std::size_t patch = 16;
  std::size_t ffn_mult = 4;
  std::size_t classes = 3;
  /// Blocks per stage, in order; must sum to `blocks`.
  std::vector<std::size_t> stage_blocks{2, 2, 2, 2};
  /// Grid used for Morton serialization.
  double grid_size = 0.02;
  /// Voxel size of the spatial stencil.
  double voxel_size = 0.3;

  void validate() const;
  std::size_t stage_of(std::size_t block) const;
  std::size_t num_stages() const { return stage_blocks.size(); }
  bool first_in_stage(std::size_t block) const;

  KeyValues to_kv() const;
  static BackboneConfig from_kv(const KeyValues& kv);
};

enum class Init { Zero, One, Uniform };

/// Name, shape and initializer of one parameter, enumerable without allocating.
struct ParamSpec {
  std::string name;
  Shape shape;
  Init init = Init::Zero;
  double bound = 0.0;
  std::size_t numel() const { return numel_of(shape); }
};

std::vector<ParamSpec> backbone_layout(const BackboneConfig& cfg);
std::size_t layout_count(const std::vector<ParamSpec>& layout);

/// Allocates and initializes every spec into store from the given RNG.
void materialize(const std::vector<ParamSpec>& layout, ParamStore& store, std::uint64_t seed,
                 std::string_view stream, bool frozen = false);
ParamStore init_backbone(const BackboneConfig& cfg, std::uint64_t seed);

/// Per-cloud inputs derived once: tensors plus serialization and stencil.
struct PreparedCloud {
  Tensor coords;
  Tensor feats;
  PatchPartition part;
  NeighborIndex nbr;
  std::vector<int> labels;
  std::size_t size() const { return coords.rows(); }
};

PreparedCloud prepare_cloud(const PointCloud& cloud, const BackboneConfig& cfg);

struct BlockActivations {
  Tensor input;
  Tensor post_attention;
  Tensor post_ffn;
};

/// Context handed to PEFT branches at each insertion point.
struct HookContext {
  const BackboneConfig& cfg;
  const ParamStore& params;
  const PreparedCloud& cloud;
  std::size_t block = 0;
  LatentState* latent = nullptr;
  const Instrumentation* inst = nullptr;
};

struct PromptTokens {
  Tensor key;
  Tensor value;
  double logit_offset = 0.0;
};

enum class InsertionPoint { PositionalEncoding, AttentionQK, AttentionPrompt, AfterAttention, AfterFfn };

/// Branch functions keyed by insertion point; empty members are not inserted.
struct HookTable {
  /// x <- x + pos(coords) + spatial(x_embed)
  std::function<Tensor(const Tensor& x_embed, HookContext&)> spatial;
  /// Q <- Q + dQ, K <- K + dK, from the normalized block input.
  std::function<std::pair<Tensor, Tensor>(const Tensor& x_norm, HookContext&)> qk_delta;
  /// Extra key/value slots shared by every patch of a block.
  std::function<std::optional<PromptTokens>(HookContext&)> prompts;
  /// x <- x + attn(LN(x)) + context(LN(x))
  std::function<Tensor(const Tensor& x_norm, HookContext&)> context;
  /// x <- after_ffn(x); returns the full residual sum.
  std::function<Tensor(const Tensor& x, HookContext&)> after_ffn;
  /// Initial latent state for a pass.
  std::function<LatentState(const ParamStore&)> init_latent;

  bool has(InsertionPoint p) const;
};

struct ForwardResult {
  Tensor logits;
  std::vector<BlockActivations> blocks;
  LatentState latent;
};

// ---- building blocks ----

Tensor embed(const Tensor& feats, const ParamStore& params);
Tensor pos_encode(const Tensor& coords, const ParamStore& params);
Tensor ffn(const Tensor& x, const ParamStore& params, const std::string& prefix);

/// Multi-head scaled dot-product attention restricted to the patches of part.
/// q, k, v are n×d in original point order; the output is too. Padded slots
/// never enter a softmax. Optional prompt slots are prepended to the keys and
/// values of every patch.
Tensor patch_attention(const Tensor& q, const Tensor& k, const Tensor& v, const PatchPartition& part,
                       std::size_t heads, const PromptTokens* prompts = nullptr,
                       AttnDump* dump = nullptr, std::size_t block = 0);

/// Projections + patch attention + output projection of one block.
Tensor local_attention(const Tensor& x_norm, const PatchPartition& part, const ParamStore& params,
                       const BackboneConfig& cfg, std::size_t block, HookContext* hooks_ctx = nullptr,
                       const HookTable* hooks = nullptr);

ForwardResult forward(const BackboneConfig& cfg, const ParamStore& params, const PreparedCloud& cloud,
                      const HookTable* hooks = nullptr, const Instrumentation* inst = nullptr);

std::string block_prefix(std::size_t block);

}  // namespace gemlab
