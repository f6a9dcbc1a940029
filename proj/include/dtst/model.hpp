#pragma once

// Full DTST model: patch embedding, N view-decoupled blocks with an optional
// token selector after block `position`, and identity / view classifiers.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "dtst/backbone.hpp"
#include "dtst/error.hpp"
#include "dtst/optim.hpp"
#include "dtst/rng.hpp"
#include "dtst/selector.hpp"
#include "dtst/tensor.hpp"

namespace dtst {

struct ModelConfig {
  std::size_t num_blocks = 4;
  std::size_t embed_dim = 32;
  std::size_t num_attn_heads = 2;
  std::size_t grid_rows = 4;
  std::size_t grid_cols = 4;
  std::size_t patch_dim = 8;
  std::size_t num_identities = 32;
  std::size_t num_views = 2;
  std::optional<SelectorConfig> selector;

  std::size_t num_patches() const { return grid_rows * grid_cols; }

  void validate() const {
    if (num_blocks < 1) throw ConfigError("ModelConfig.num_blocks must be positive");
    if (embed_dim < 1) throw ConfigError("ModelConfig.embed_dim must be positive");
    if (num_attn_heads < 1 || embed_dim % num_attn_heads != 0)
      throw ConfigError("ModelConfig.num_attn_heads=" + std::to_string(num_attn_heads) +
                        " must divide embed_dim=" + std::to_string(embed_dim));
    if (grid_rows < 1 || grid_cols < 1) throw ConfigError("ModelConfig.patch_grid extents must be positive");
    if (patch_dim < 1) throw ConfigError("ModelConfig.patch_dim must be positive");
    if (num_identities < 1) throw ConfigError("ModelConfig.num_identities must be positive");
    if (num_views != 2) throw ConfigError("ModelConfig.num_views must be 2");
    if (selector) selector->validate(num_patches(), embed_dim, num_blocks);
  }
};

struct ModelParams {
  Tensor patch_proj;   // [patch_dim, d]
  Tensor patch_bias;   // [d]
  Tensor pos_embed;    // [M, d]
  Tensor meta_token;   // [1, d]
  Tensor view_tokens;  // [2, d], row 0 aerial, row 1 ground
  std::vector<BlockParams> blocks;
  std::optional<SelectorParams> selector;
  Tensor id_head, id_bias;      // [d, C], [C]
  Tensor view_head, view_bias;  // [d, 2], [2]

  /// Every trainable tensor under a stable, checkpoint-friendly name.
  ParamList named() const {
    ParamList out = {{"patch.proj", patch_proj},
                     {"patch.bias", patch_bias},
                     {"patch.pos_embed", pos_embed},
                     {"tokens.meta", meta_token},
                     {"tokens.view", view_tokens}};
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].append_to(out, "block" + std::to_string(i + 1) + ".");
    if (selector) {
      out.push_back({"selector.w_q", selector->w_q});
      out.push_back({"selector.w_k", selector->w_k});
    }
    out.push_back({"head.id.weight", id_head});
    out.push_back({"head.id.bias", id_bias});
    out.push_back({"head.view.weight", view_head});
    out.push_back({"head.view.bias", view_bias});
    return out;
  }
};

inline ModelParams init_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.embed_dim;
  ModelParams p;
  p.patch_proj = init::uniform({cfg.patch_dim, d}, d, rng);
  p.patch_bias = init::constant({d}, 0.0);
  p.pos_embed = init::uniform({cfg.num_patches(), d}, d, rng);
  p.meta_token = init::uniform({1, d}, d, rng);
  p.view_tokens = init::uniform({2, d}, d, rng);
  for (std::size_t i = 0; i < cfg.num_blocks; ++i) p.blocks.push_back(make_block_params(d, rng));
  p.id_head = init::uniform({d, cfg.num_identities}, d, rng);
  p.id_bias = init::constant({cfg.num_identities}, 0.0);
  p.view_head = init::uniform({d, cfg.num_views}, d, rng);
  p.view_bias = init::constant({cfg.num_views}, 0.0);
  // Drawn last so that the shared parameters are identical with or without a
  // selector for the same seed.
  if (cfg.selector) p.selector = SelectorParams::make(d, rng);
  return p;
}

/// Input batch: feature grids [B, rows, cols, patch_dim] and view labels.
struct Batch {
  Tensor grids;
  std::vector<View> views;
  std::vector<std::size_t> ids;
};

struct ForwardOptions {
  bool training = false;  // enables Gumbel noise when the selector allows it
  Rng* rng = nullptr;
  const FrozenSelection* frozen = nullptr;
};

struct ModelOutput {
  Tensor meta_feature;  // [B, d]
  Tensor view_feature;  // [B, d]
  Tensor id_logits;     // [B, C]
  Tensor view_logits;   // [B, 2]
  std::optional<SelectorTrace> selector;
  std::vector<std::vector<std::size_t>> kept_origin;  // surviving patch grid indices
};

inline ModelOutput model_forward(const ModelConfig& cfg, const ModelParams& params, const Batch& batch,
                                 const ForwardOptions& opts = {}) {
  if (batch.grids.rank() != 4 || batch.grids.dim(1) != cfg.grid_rows || batch.grids.dim(2) != cfg.grid_cols ||
      batch.grids.dim(3) != cfg.patch_dim)
    throw DimensionError("model_forward: batch grids " + shape_str(batch.grids.shape()) +
                         " do not conform to the configured grid");
  if (params.blocks.size() != cfg.num_blocks)
    throw DimensionError("model_forward: parameter set has " + std::to_string(params.blocks.size()) +
                         " blocks, config expects " + std::to_string(cfg.num_blocks));
  if (cfg.selector && !params.selector) throw ContractError("model_forward: selector configured without parameters");

  Tensor patches = patch_embed(batch.grids, params.patch_proj, params.patch_bias, params.pos_embed);
  TokenSequence seq = attach_special_tokens(patches, batch.views, params.meta_token, params.view_tokens);

  ModelOutput out;
  std::optional<Tensor> full_tokens, full_mask;  // set when selection happens after the final block
  for (std::size_t block = 1; block <= cfg.num_blocks; ++block) {
    seq = vdt_decouple(encoder_block(seq, params.blocks[block - 1], cfg.num_attn_heads));
    if (cfg.selector && cfg.selector->position == block) {
      SelectorTrace trace;
      const bool noise = opts.training && cfg.selector->noise_enabled;
      TokenSequence reduced = apply_selector(seq, *params.selector, *cfg.selector, opts.rng, noise, opts.frozen, &trace);
      if (block == cfg.num_blocks) {
        const auto& sel = trace.selection;
        full_tokens = seq.tokens;
        full_mask = straight_through_mask(sel.soft, sel.indices, sel.anchor);
      }
      seq = std::move(reduced);
      out.selector = std::move(trace);
    }
  }

  // Head feature: meta slot plus the mean of the surviving patch tokens. When
  // the last block's output was reduced, the mean runs over the unreduced
  // tokens under a 0/1 straight-through mask so that unchosen tokens receive
  // gradient too; the forward value equals the mean over the chosen ones.
  const Tensor pooled = full_tokens ? pool_patches(*full_tokens, &*full_mask)
                                    : pool_patches(seq.tokens, seq.gate ? &*seq.gate : nullptr);
  out.meta_feature = add(take_slot(seq.tokens, kMetaSlot), pooled);
  out.view_feature = take_slot(seq.tokens, kViewSlot);
  out.id_logits = add_broadcast(linear(out.meta_feature, params.id_head), params.id_bias);
  out.view_logits = add_broadcast(linear(out.view_feature, params.view_head), params.view_bias);
  out.kept_origin = seq.origin;
  return out;
}

/// Pins the selector decisions of `out` so a later forward reproduces them.
inline std::optional<FrozenSelection> freeze_selection(const ModelOutput& out) {
  if (!out.selector) return std::nullopt;
  const auto& sel = out.selector->selection;
  FrozenSelection f{sel.indices, sel.gumbel, sel.anchor};
  return f;
}

}  // namespace dtst
