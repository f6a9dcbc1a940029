#pragma once

// View-decoupled transformer backbone: patch embedding, the meta/view special
// tokens, pre-norm encoder blocks and the meta-minus-view subtraction that
// follows every block.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "dtst/error.hpp"
#include "dtst/optim.hpp"
#include "dtst/rng.hpp"
#include "dtst/tensor.hpp"

namespace dtst {

enum class View : unsigned char { Aerial = 0, Ground = 1 };

inline const char* view_name(View v) { return v == View::Aerial ? "aerial" : "ground"; }

inline View parse_view(const std::string& s) {
  if (s == "aerial" || s == "A" || s == "a") return View::Aerial;
  if (s == "ground" || s == "G" || s == "g") return View::Ground;
  throw DomainError("unknown view label '" + s + "'");
}

inline View view_from_index(std::size_t i) {
  if (i > 1) throw DomainError("unknown view label index " + std::to_string(i));
  return static_cast<View>(i);
}

inline constexpr std::size_t kMetaSlot = 0;
inline constexpr std::size_t kViewSlot = 1;
inline constexpr std::size_t kFirstPatchSlot = 2;

/// Batch of token embeddings: slot 0 meta, slot 1 view, then patch tokens.
/// `origin[b]` holds the original grid index of every remaining patch token.
struct TokenSequence {
  Tensor tokens;  // [B, M + 2, d]
  std::vector<View> views;
  std::vector<std::vector<std::size_t>> origin;
  // Optional [B, L] straight-through slot weights set by the token selector
  // (forward value exactly one). Later blocks add their log to the attention
  // logits of each key slot; patch pooling scales each slot by them.
  std::optional<Tensor> gate;

  std::size_t batch() const { return tokens.dim(0); }
  std::size_t length() const { return tokens.dim(1); }
  std::size_t num_patches() const { return tokens.dim(1) - kFirstPatchSlot; }
  std::size_t width() const { return tokens.dim(2); }
};

struct BlockParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  Tensor ln2_gamma, ln2_beta;
  Tensor w_fc1, b_fc1, w_fc2, b_fc2;

  void append_to(ParamList& out, const std::string& prefix) const {
    const std::pair<const char*, const Tensor*> named[] = {
        {"ln1_gamma", &ln1_gamma}, {"ln1_beta", &ln1_beta}, {"w_q", &w_q},       {"b_q", &b_q},
        {"w_k", &w_k},             {"b_k", &b_k},           {"w_v", &w_v},       {"b_v", &b_v},
        {"w_o", &w_o},             {"b_o", &b_o},           {"ln2_gamma", &ln2_gamma},
        {"ln2_beta", &ln2_beta},   {"w_fc1", &w_fc1},       {"b_fc1", &b_fc1},   {"w_fc2", &w_fc2},
        {"b_fc2", &b_fc2}};
    for (const auto& [name, t] : named) out.push_back({prefix + name, *t});
  }
};

inline constexpr std::size_t kMlpRatio = 4;
inline constexpr double kLayerNormEps = 1e-6;

namespace init {

/// Uniform(-1/sqrt(d), 1/sqrt(d)) trainable tensor.
inline Tensor uniform(Shape shape, std::size_t d, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(data)).set_requires_grad(true);
}

inline Tensor constant(Shape shape, double value) {
  return Tensor::full(std::move(shape), value).set_requires_grad(true);
}

}  // namespace init

inline BlockParams make_block_params(std::size_t d, Rng& rng) {
  const std::size_t hidden = kMlpRatio * d;
  BlockParams p;
  p.ln1_gamma = init::constant({d}, 1.0);
  p.ln1_beta = init::constant({d}, 0.0);
  p.w_q = init::uniform({d, d}, d, rng);
  p.b_q = init::constant({d}, 0.0);
  p.w_k = init::uniform({d, d}, d, rng);
  p.b_k = init::constant({d}, 0.0);
  p.w_v = init::uniform({d, d}, d, rng);
  p.b_v = init::constant({d}, 0.0);
  p.w_o = init::uniform({d, d}, d, rng);
  p.b_o = init::constant({d}, 0.0);
  p.ln2_gamma = init::constant({d}, 1.0);
  p.ln2_beta = init::constant({d}, 0.0);
  p.w_fc1 = init::uniform({d, hidden}, d, rng);
  p.b_fc1 = init::constant({hidden}, 0.0);
  p.w_fc2 = init::uniform({hidden, d}, d, rng);
  p.b_fc2 = init::constant({d}, 0.0);
  return p;
}

// ---------------------------------------------------------------------------

/// Projects every grid cell of x[B, rows, cols, patch_dim] to width d and adds
/// the positional embedding of its grid index. Returns [B, rows*cols, d].
inline Tensor patch_embed(const Tensor& grid, const Tensor& proj, const Tensor& bias,
                          const Tensor& pos) {
  if (grid.rank() != 4)
    throw DimensionError("patch_embed: expected [B, rows, cols, patch_dim], got " + shape_str(grid.shape()));
  const std::size_t b = grid.dim(0), m = grid.dim(1) * grid.dim(2), pd = grid.dim(3);
  if (proj.rank() != 2 || proj.dim(0) != pd)
    throw DimensionError("patch_embed: projection " + shape_str(proj.shape()) +
                         " does not accept patch width " + std::to_string(pd));
  const std::size_t d = proj.dim(1);
  if (bias.shape() != Shape{d} || pos.shape() != Shape{m, d})
    throw DimensionError("patch_embed: bias " + shape_str(bias.shape()) + " / positional " +
                         shape_str(pos.shape()) + " inconsistent with " + std::to_string(m) +
                         " patches of width " + std::to_string(d));
  Tensor flat = reshape(grid, {b, m, pd});
  return add_broadcast(add_broadcast(linear(flat, proj), bias), pos);
}

/// Prepends the meta token and each item's view token to the patch tokens.
inline TokenSequence attach_special_tokens(const Tensor& patches, const std::vector<View>& views,
                                           const Tensor& meta_init, const Tensor& view_inits) {
  if (patches.rank() != 3)
    throw DimensionError("attach_special_tokens: patches must be [B, M, d], got " + shape_str(patches.shape()));
  const std::size_t b = patches.dim(0), m = patches.dim(1), d = patches.dim(2);
  if (views.size() != b)
    throw ContractError("attach_special_tokens: " + std::to_string(views.size()) +
                        " view labels for batch of " + std::to_string(b));
  if (meta_init.shape() != Shape{1, d} || view_inits.shape() != Shape{2, d})
    throw DimensionError("attach_special_tokens: special token tables " + shape_str(meta_init.shape()) +
                         " / " + shape_str(view_inits.shape()) + " inconsistent with width " + std::to_string(d));
  std::vector<std::size_t> meta_rows(b, 0), view_rows(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto v = static_cast<std::size_t>(views[i]);
    if (v > 1) throw DomainError("attach_special_tokens: unknown view label " + std::to_string(v));
    view_rows[i] = v;
  }
  Tensor meta = reshape(lookup_rows(meta_init, meta_rows), {b, 1, d});
  Tensor view = reshape(lookup_rows(view_inits, view_rows), {b, 1, d});

  TokenSequence seq;
  seq.tokens = concat_tokens({meta, view, patches});
  seq.views = views;
  seq.origin.assign(b, std::vector<std::size_t>(m));
  for (auto& o : seq.origin)
    for (std::size_t i = 0; i < m; ++i) o[i] = i;
  return seq;
}

/// scores[B*H, L, L] + bias[B, L] broadcast over heads and query rows.
inline Tensor add_key_bias(const Tensor& scores, const Tensor& bias, std::size_t heads) {
  const std::size_t g = scores.dim(0), l = scores.dim(1);
  if (bias.rank() != 2 || bias.dim(0) * heads != g || bias.dim(1) != l || scores.dim(2) != l)
    throw DimensionError("add_key_bias: bias " + shape_str(bias.shape()) + " incompatible with scores " +
                         shape_str(scores.shape()));
  std::vector<double> out(scores.data().begin(), scores.data().end());
  for (std::size_t gi = 0; gi < g; ++gi)
    for (std::size_t q = 0; q < l; ++q)
      for (std::size_t k = 0; k < l; ++k) out[(gi * l + q) * l + k] += bias[(gi / heads) * l + k];
  return detail::finish(scores.shape(), std::move(out), {&scores, &bias}, [scores, bias, g, l, heads](detail::Node& self) {
    if (auto* gs = detail::grad_sink(scores))
      for (std::size_t i = 0; i < gs->size(); ++i) (*gs)[i] += self.grad[i];
    if (auto* gb = detail::grad_sink(bias))
      for (std::size_t gi = 0; gi < g; ++gi)
        for (std::size_t q = 0; q < l; ++q)
          for (std::size_t k = 0; k < l; ++k) (*gb)[(gi / heads) * l + k] += self.grad[(gi * l + q) * l + k];
  });
}

/// Multi-head scaled dot-product self-attention over x[B, L, d] (no norm, no
/// residual). `key_bias` [B, L], when given, is added to every query's logits.
inline Tensor self_attention(const Tensor& x, const BlockParams& p, std::size_t heads,
                             const Tensor* key_bias = nullptr) {
  const std::size_t d = x.dim(2);
  if (heads == 0 || d % heads != 0)
    throw DimensionError("self_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(d / heads));
  Tensor q = split_heads(add_broadcast(linear(x, p.w_q), p.b_q), heads);
  Tensor k = split_heads(add_broadcast(linear(x, p.w_k), p.b_k), heads);
  Tensor v = split_heads(add_broadcast(linear(x, p.w_v), p.b_v), heads);
  Tensor logits = scale(bmm(q, k, /*transpose_b=*/true), inv_sqrt_dh);
  if (key_bias) logits = add_key_bias(logits, *key_bias, heads);
  Tensor attn = softmax_lastdim(logits);
  Tensor ctx = merge_heads(bmm(attn, v), heads);
  return add_broadcast(linear(ctx, p.w_o), p.b_o);
}

/// Pre-norm encoder block: x + MHSA(LN(x)), then x + MLP(LN(x)).
inline Tensor encoder_block(const Tensor& x, const BlockParams& p, std::size_t heads,
                            const Tensor* key_bias = nullptr) {
  if (x.rank() != 3 || x.dim(1) == 0) throw DimensionError("encoder_block: expected nonempty [B, L, d]");
  Tensor h = add(x, self_attention(layer_norm(x, p.ln1_gamma, p.ln1_beta, kLayerNormEps), p, heads, key_bias));
  Tensor n2 = layer_norm(h, p.ln2_gamma, p.ln2_beta, kLayerNormEps);
  Tensor mlp = add_broadcast(linear(gelu(add_broadcast(linear(n2, p.w_fc1), p.b_fc1)), p.w_fc2), p.b_fc2);
  return add(h, mlp);
}

inline TokenSequence encoder_block(const TokenSequence& seq, const BlockParams& p, std::size_t heads) {
  TokenSequence out = seq;
  if (seq.gate) {
    const Tensor log_gate = log_clamped(*seq.gate, 1e-12);
    out.tokens = encoder_block(seq.tokens, p, heads, &log_gate);
  } else {
    out.tokens = encoder_block(seq.tokens, p, heads);
  }
  return out;
}

/// meta <- meta - view for every item; all other slots pass through.
inline Tensor vdt_decouple(const Tensor& tokens) {
  if (tokens.rank() != 3 || tokens.dim(1) < 2)
    throw DimensionError("vdt_decouple: meta and view slots required, got " + shape_str(tokens.shape()));
  const std::size_t b = tokens.dim(0), l = tokens.dim(1), d = tokens.dim(2);
  std::vector<double> out(tokens.data().begin(), tokens.data().end());
  for (std::size_t bi = 0; bi < b; ++bi) {
    double* meta = out.data() + (bi * l + kMetaSlot) * d;
    const double* view = tokens.data().data() + (bi * l + kViewSlot) * d;
    for (std::size_t c = 0; c < d; ++c) meta[c] -= view[c];
  }
  return detail::finish(tokens.shape(), std::move(out), {&tokens}, [tokens, b, l, d](detail::Node& self) {
    if (auto* g = detail::grad_sink(tokens)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t c = 0; c < d; ++c)
          (*g)[(bi * l + kViewSlot) * d + c] -= self.grad[(bi * l + kMetaSlot) * d + c];
    }
  });
}

inline TokenSequence vdt_decouple(const TokenSequence& seq) {
  TokenSequence out = seq;
  out.tokens = vdt_decouple(seq.tokens);
  return out;
}

/// Weighted mean of the patch slots of x[B, L, d]: sum_j w_j t_j / sum_j w_j
/// with w = gate[B, L] (all ones when absent; special slots are skipped).
inline Tensor pool_patches(const Tensor& tokens, const Tensor* gate = nullptr) {
  if (tokens.rank() != 3 || tokens.dim(1) <= kFirstPatchSlot)
    throw DimensionError("pool_patches: no patch slots in " + shape_str(tokens.shape()));
  const std::size_t b = tokens.dim(0), l = tokens.dim(1), d = tokens.dim(2);
  if (gate && (gate->rank() != 2 || gate->dim(0) != b || gate->dim(1) != l))
    throw DimensionError("pool_patches: gate " + shape_str(gate->shape()) + " does not match " + shape_str(tokens.shape()));
  auto weight = [gate, l](std::size_t bi, std::size_t slot) { return gate ? (*gate)[bi * l + slot] : 1.0; };
  std::vector<double> out(b * d, 0.0), total(b, 0.0);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t slot = kFirstPatchSlot; slot < l; ++slot) {
      const double w = weight(bi, slot);
      total[bi] += w;
      for (std::size_t c = 0; c < d; ++c) out[bi * d + c] += w * tokens[(bi * l + slot) * d + c];
    }
    if (!(std::abs(total[bi]) > 0.0)) throw NumericError("pool_patches: gate weights sum to zero");
    for (std::size_t c = 0; c < d; ++c) out[bi * d + c] /= total[bi];
  }
  const Tensor none;
  const Tensor& g = gate ? *gate : none;
  const std::vector<double> mean = out;
  auto propagate = [tokens, g, b, l, d, total, mean](detail::Node& self) {
    auto* gt = detail::grad_sink(tokens);
    auto* gg = g.defined() ? detail::grad_sink(g) : nullptr;
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t slot = kFirstPatchSlot; slot < l; ++slot) {
        const double w = g.defined() ? g[bi * l + slot] : 1.0;
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double go = self.grad[bi * d + c] / total[bi];
          if (gt) (*gt)[(bi * l + slot) * d + c] += go * w;
          dot += go * (tokens[(bi * l + slot) * d + c] - mean[bi * d + c]);
        }
        if (gg) (*gg)[bi * l + slot] += dot;
      }
  };
  if (gate) return detail::finish({b, d}, std::move(out), {&tokens, gate}, propagate);
  return detail::finish({b, d}, std::move(out), {&tokens}, propagate);
}

/// Extracts token slot `slot` of x[B, L, d] as [B, d].
inline Tensor take_slot(const Tensor& tokens, std::size_t slot) {
  const std::size_t b = tokens.dim(0), d = tokens.dim(2);
  return reshape(gather_tokens(tokens, std::vector<std::vector<std::size_t>>(b, {slot})), {b, d});
}

}  // namespace dtst
