#pragma once

// Visual token selector: quadratic-form importance scores, deterministic
// top-K and the Gumbel-perturbed relaxation used for straight-through
// training.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dtst/backbone.hpp"
#include "dtst/error.hpp"
#include "dtst/rng.hpp"
#include "dtst/tensor.hpp"

namespace dtst {

inline constexpr double kScoreFloor = 1e-12;

struct SelectorConfig {
  std::size_t k = 2;
  double temperature = 1.0;
  std::size_t num_heads = 2;
  std::size_t position = 4;  // applied to the output of this block (1-based)
  bool noise_enabled = true;

  void validate(std::size_t num_patches, std::size_t embed_dim, std::size_t num_blocks) const {
    if (k < 1 || k > num_patches)
      throw ConfigError("SelectorConfig.K must satisfy 1 <= K <= M (K=" + std::to_string(k) +
                        ", M=" + std::to_string(num_patches) + ")");
    if (!(temperature > 0.0) || !std::isfinite(temperature))
      throw ConfigError("SelectorConfig.temperature must be positive and finite");
    if (num_heads < 1 || embed_dim % num_heads != 0)
      throw ConfigError("SelectorConfig.num_heads=" + std::to_string(num_heads) +
                        " must divide embed_dim=" + std::to_string(embed_dim));
    if (position < 1 || position > num_blocks)
      throw ConfigError("SelectorConfig.position=" + std::to_string(position) + " must lie in [1, " +
                        std::to_string(num_blocks) + "]");
  }
};

struct SelectorParams {
  Tensor w_q;  // [d, d]
  Tensor w_k;  // [d, d]

  /// W_k starts as a copy of W_q, so the initial quadratic form is positive
  /// semidefinite and ranks tokens by projected energy.
  static SelectorParams make(std::size_t d, Rng& rng) {
    Tensor w_q = init::uniform({d, d}, d, rng);
    Tensor w_k = w_q.detach().set_requires_grad(true);
    return {w_q, w_k};
  }
};

struct ScoreVector {
  Tensor scores;                   // [B, M], rows sum to one
  std::optional<Tensor> perturbed;  // [B, M] relaxed weights
};

/// s = softmax over tokens of t^T W_q W_k^T t. With H heads the quadratic form
/// is split into d/H column slices, each scaled by 1/sqrt(d/H), and the heads
/// are averaged.
inline ScoreVector score_tokens(const Tensor& patch_tokens, const SelectorParams& params, std::size_t heads) {
  if (patch_tokens.rank() != 3)
    throw DimensionError("score_tokens: expected [B, M, d], got " + shape_str(patch_tokens.shape()));
  const std::size_t b = patch_tokens.dim(0), m = patch_tokens.dim(1), d = patch_tokens.dim(2);
  if (heads == 0 || d % heads != 0)
    throw ConfigError("score_tokens: " + std::to_string(heads) + " heads do not divide width " + std::to_string(d));
  const std::size_t dh = d / heads;
  Tensor q = linear(patch_tokens, params.w_q);
  Tensor k = linear(patch_tokens, params.w_k);
  Tensor per_head = sum_lastdim(reshape(mul(q, k), {b, m, heads, dh}));  // [B, M, H]
  Tensor raw = scale(sum_lastdim(per_head), 1.0 / (static_cast<double>(heads) * std::sqrt(static_cast<double>(dh))));
  return {softmax_lastdim(raw), std::nullopt};
}

/// Indices of the K largest scores, ties toward the lower index, returned in
/// ascending index order.
inline std::vector<std::size_t> hard_topk(std::span<const double> scores, std::size_t k) {
  if (k > scores.size())
    throw ConfigError("hard_topk: K=" + std::to_string(k) + " exceeds M=" + std::to_string(scores.size()));
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

/// Forward choice and the data needed to reproduce it exactly.
struct Selection {
  std::vector<std::vector<std::size_t>> indices;  // [B][K], ascending
  Tensor soft;                                    // [B, M] relaxed weights (on tape)
  std::vector<double> gumbel;                     // [B * M], zero when noise is off
  std::vector<std::vector<double>> anchor;        // [B][M] detached soft weights
};

/// Selection pinned from an earlier forward pass: reuses its noise and
/// indices and keeps the straight-through anchor fixed, which turns the model
/// into the smooth surrogate used for finite-difference checks.
struct FrozenSelection {
  std::vector<std::vector<std::size_t>> indices;
  std::vector<double> gumbel;
  std::vector<std::vector<double>> anchor;  // [B][M] detached soft weights
};

/// Gumbel-perturbed relaxation: soft = softmax((log s + g) / tau); indices are
/// the hard top-K of the perturbed logits (of s itself when noise is off).
inline Selection perturbed_topk(const Tensor& scores, const SelectorConfig& cfg, Rng* rng,
                                bool use_noise, const std::vector<double>* fixed_gumbel = nullptr) {
  if (scores.rank() != 2) throw DimensionError("perturbed_topk: expected [B, M], got " + shape_str(scores.shape()));
  const std::size_t b = scores.dim(0), m = scores.dim(1);
  if (cfg.k > m) throw ConfigError("perturbed_topk: K=" + std::to_string(cfg.k) + " exceeds M=" + std::to_string(m));
  if (!(cfg.temperature > 0.0)) throw ConfigError("perturbed_topk: temperature must be positive");

  Selection sel;
  sel.gumbel.assign(b * m, 0.0);
  if (fixed_gumbel) {
    if (fixed_gumbel->size() != b * m) throw DimensionError("perturbed_topk: frozen noise has wrong size");
    sel.gumbel = *fixed_gumbel;
  } else if (use_noise) {
    if (!rng) throw ContractError("perturbed_topk: noise enabled without a random stream");
    for (auto& g : sel.gumbel) g = rng->gumbel();
  }
  const bool noisy = std::any_of(sel.gumbel.begin(), sel.gumbel.end(), [](double g) { return g != 0.0; });

  Tensor logits = scale(add(log_clamped(scores, kScoreFloor), Tensor::from({b, m}, sel.gumbel)), 1.0 / cfg.temperature);
  sel.soft = softmax_lastdim(logits);
  sel.indices.resize(b);
  const std::span<const double> ranked = noisy ? logits.data() : scores.data();
  for (std::size_t i = 0; i < b; ++i) sel.indices[i] = hard_topk(ranked.subspan(i * m, m), cfg.k);
  return sel;
}

inline void validate_indices(const std::vector<std::size_t>& idx, std::size_t m) {
  std::set<std::size_t> seen;
  for (auto i : idx) {
    if (i >= m) throw ContractError("select_tokens: index " + std::to_string(i) + " out of range for M=" + std::to_string(m));
    if (!seen.insert(i).second) throw ContractError("select_tokens: duplicate index " + std::to_string(i));
  }
}

/// Keeps the meta and view slots plus the chosen patch slots (in original
/// order). `indices` are positions within the current patch region.
inline TokenSequence select_tokens(const TokenSequence& seq, const std::vector<std::vector<std::size_t>>& indices) {
  const std::size_t b = seq.batch(), m = seq.num_patches();
  if (indices.size() != b)
    throw ContractError("select_tokens: " + std::to_string(indices.size()) + " index rows for batch " + std::to_string(b));
  std::vector<std::vector<std::size_t>> slots(b);
  TokenSequence out;
  out.views = seq.views;
  out.origin.resize(b);
  for (std::size_t i = 0; i < b; ++i) {
    validate_indices(indices[i], m);
    std::vector<std::size_t> sorted = indices[i];
    std::sort(sorted.begin(), sorted.end());
    slots[i] = {kMetaSlot, kViewSlot};
    for (auto j : sorted) {
      slots[i].push_back(kFirstPatchSlot + j);
      out.origin[i].push_back(seq.origin[i][j]);
    }
  }
  out.tokens = gather_tokens(seq.tokens, slots);
  return out;
}

/// Per-slot gate of the reduced sequence: 1 for the meta and view slots and
/// 1 + (soft[b, j] - anchor[b][j]) for retained patch j. With the anchor equal
/// to the live soft weights the forward value is exactly one while the
/// backward pass routes gradient into `soft`.
inline Tensor straight_through_gate(const Tensor& soft, const std::vector<std::vector<std::size_t>>& indices,
                                    const std::vector<std::vector<double>>& anchor) {
  const std::size_t b = soft.dim(0), m = soft.dim(1);
  if (indices.size() != b || anchor.size() != b) throw DimensionError("straight_through_gate: batch mismatch");
  const std::size_t k = indices.empty() ? 0 : indices[0].size(), l = k + kFirstPatchSlot;
  std::vector<double> out(b * l, 1.0);
  for (std::size_t bi = 0; bi < b; ++bi) {
    if (indices[bi].size() != k || anchor[bi].size() != m)
      throw DimensionError("straight_through_gate: selection width mismatch");
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t t = indices[bi][j];
      out[bi * l + kFirstPatchSlot + j] = 1.0 + (soft[bi * m + t] - anchor[bi][t]);
    }
  }
  return detail::finish({b, l}, std::move(out), {&soft}, [soft, indices, b, l, m, k](detail::Node& self) {
    if (auto* gs = detail::grad_sink(soft))
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t j = 0; j < k; ++j) (*gs)[bi * m + indices[bi][j]] += self.grad[bi * l + kFirstPatchSlot + j];
  });
}

/// Full-width straight-through mask [B, M + 2] over the unreduced sequence:
/// forward 1 on the special and chosen slots and exactly 0 elsewhere, backward
/// the identity into `soft` for every patch slot.
inline Tensor straight_through_mask(const Tensor& soft, const std::vector<std::vector<std::size_t>>& indices,
                                    const std::vector<std::vector<double>>& anchor) {
  const std::size_t b = soft.dim(0), m = soft.dim(1), l = m + kFirstPatchSlot;
  if (indices.size() != b || anchor.size() != b) throw DimensionError("straight_through_mask: batch mismatch");
  std::vector<double> out(b * l, 0.0);
  for (std::size_t bi = 0; bi < b; ++bi) {
    if (anchor[bi].size() != m) throw DimensionError("straight_through_mask: anchor width mismatch");
    out[bi * l + kMetaSlot] = out[bi * l + kViewSlot] = 1.0;
    std::vector<bool> chosen(m, false);
    for (auto t : indices[bi]) chosen.at(t) = true;
    for (std::size_t t = 0; t < m; ++t)
      out[bi * l + kFirstPatchSlot + t] = (chosen[t] ? 1.0 : 0.0) + (soft[bi * m + t] - anchor[bi][t]);
  }
  return detail::finish({b, l}, std::move(out), {&soft}, [soft, b, l, m](detail::Node& self) {
    if (auto* gs = detail::grad_sink(soft))
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t t = 0; t < m; ++t) (*gs)[bi * m + t] += self.grad[bi * l + kFirstPatchSlot + t];
  });
}

struct SelectorTrace {
  ScoreVector scores;
  Selection selection;
};

/// Full selector stage on a sequence: score patch tokens, choose K and keep
/// the special slots. The retained tokens carry a straight-through gate that
/// later blocks and the patch pooling consume.
inline TokenSequence apply_selector(const TokenSequence& seq, const SelectorParams& params,
                                    const SelectorConfig& cfg, Rng* rng, bool use_noise,
                                    const FrozenSelection* frozen, SelectorTrace* trace) {
  const std::size_t b = seq.batch(), m = seq.num_patches();
  if (cfg.k > m) throw ConfigError("selector: K=" + std::to_string(cfg.k) + " exceeds M=" + std::to_string(m));
  std::vector<std::vector<std::size_t>> patch_slots(b);
  for (auto& row : patch_slots)
    for (std::size_t j = 0; j < m; ++j) row.push_back(kFirstPatchSlot + j);
  Tensor patches = gather_tokens(seq.tokens, patch_slots);

  ScoreVector sv = score_tokens(patches, params, cfg.num_heads);
  Selection sel = perturbed_topk(sv.scores, cfg, rng, use_noise, frozen ? &frozen->gumbel : nullptr);
  if (frozen) sel.indices = frozen->indices;
  sv.perturbed = sel.soft;

  if (frozen) {
    sel.anchor = frozen->anchor;
  } else {
    sel.anchor.assign(b, std::vector<double>(m));
    for (std::size_t i = 0; i < b; ++i) std::copy_n(sel.soft.data().begin() + i * m, m, sel.anchor[i].begin());
  }
  TokenSequence out = select_tokens(seq, sel.indices);
  out.gate = straight_through_gate(sel.soft, sel.indices, sel.anchor);
  if (trace) *trace = {std::move(sv), std::move(sel)};
  return out;
}

}  // namespace dtst
