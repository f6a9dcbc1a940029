#include <gtest/gtest.h>

#include <cmath>

#include "dtst/model.hpp"
#include "dtst/objectives.hpp"
#include "support.hpp"

using namespace dtst;
using dtst::testing::gradient_error;
using dtst::testing::random_leaf;
using dtst::testing::random_tensor;
using dtst::testing::weighted_sum;

namespace {

ModelConfig tiny_config(std::size_t blocks, std::size_t d, std::size_t rows, std::size_t cols) {
  ModelConfig c;
  c.num_blocks = blocks;
  c.embed_dim = d;
  c.num_attn_heads = 2;
  c.grid_rows = rows;
  c.grid_cols = cols;
  c.patch_dim = 3;
  c.num_identities = 4;
  return c;
}

Batch random_batch(const ModelConfig& c, std::size_t b, Rng& rng) {
  Batch batch;
  std::vector<double> grid(b * c.num_patches() * c.patch_dim);
  for (auto& v : grid) v = rng.normal();
  batch.grids = Tensor::from({b, c.grid_rows, c.grid_cols, c.patch_dim}, std::move(grid));
  for (std::size_t i = 0; i < b; ++i) {
    batch.views.push_back(view_from_index(i % 2));
    batch.ids.push_back(i % c.num_identities);
  }
  return batch;
}

std::vector<Tensor> param_tensors(const ModelParams& p) {
  std::vector<Tensor> out;
  for (const auto& np : p.named()) out.push_back(np.tensor);
  return out;
}

}  // namespace

TEST(Backbone, OutputShapeLaw) {
  Rng rng(1);
  ModelConfig c = tiny_config(2, 8, 2, 3);
  ModelParams p = init_model(c, rng);
  ModelOutput out = model_forward(c, p, random_batch(c, 3, rng));
  EXPECT_EQ(out.meta_feature.shape(), (Shape{3, 8}));
  EXPECT_EQ(out.view_feature.shape(), (Shape{3, 8}));
  EXPECT_EQ(out.id_logits.shape(), (Shape{3, 4}));
  EXPECT_EQ(out.view_logits.shape(), (Shape{3, 2}));
}

TEST(Backbone, SelectorShortensSequenceToKPlusTwo) {
  Rng rng(2);
  ModelConfig c = tiny_config(3, 8, 2, 3);
  c.selector = SelectorConfig{.k = 2, .temperature = 1.0, .num_heads = 2, .position = 2, .noise_enabled = false};
  ModelParams p = init_model(c, rng);
  ModelOutput out = model_forward(c, p, random_batch(c, 2, rng));
  ASSERT_TRUE(out.selector.has_value());
  for (const auto& row : out.kept_origin) EXPECT_EQ(row.size(), 2u);
}

TEST(Backbone, EncoderBlockIsPermutationEquivariant) {
  Rng rng(3);
  const std::size_t l = 5, d = 8;
  BlockParams p = make_block_params(d, rng);
  Tensor x = random_tensor({1, l, d}, rng);
  const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
  Tensor xp = gather_tokens(x, {perm});
  Tensor y = encoder_block(x, p, 2), yp = encoder_block(xp, p, 2);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(yp[i * d + c], y[perm[i] * d + c], 1e-10);
}

TEST(Backbone, EncoderBlockRejectsIndivisibleHeads) {
  Rng rng(4);
  BlockParams p = make_block_params(6, rng);
  EXPECT_THROW(encoder_block(Tensor::zeros({1, 3, 6}), p, 4), DimensionError);
}

TEST(VdtDecouple, EqualMetaAndViewGivesZero) {
  Tensor t = Tensor::from({1, 3, 2}, {1.5, -2, 1.5, -2, 7, 8});
  Tensor y = vdt_decouple(t);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(y[4], 7.0);
}

TEST(VdtDecouple, ZeroViewLeavesMetaUnchanged) {
  Tensor t = Tensor::from({1, 2, 2}, {3, 4, 0, 0});
  Tensor y = vdt_decouple(t);
  EXPECT_EQ(y[0], 3.0);
  EXPECT_EQ(y[1], 4.0);
}

TEST(VdtDecouple, SecondApplicationSubtractsViewAgain) {
  Rng rng(5);
  Tensor t = random_tensor({2, 4, 3}, rng);
  Tensor once = vdt_decouple(t), twice = vdt_decouple(once);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c) {
      const double meta1 = once[(b * 4 + kMetaSlot) * 3 + c], view = t[(b * 4 + kViewSlot) * 3 + c];
      EXPECT_NEAR(twice[(b * 4 + kMetaSlot) * 3 + c], meta1 - view, 1e-15);
    }
}

TEST(VdtDecouple, MissingSpecialSlotsIsDimensionError) {
  EXPECT_THROW(vdt_decouple(Tensor::zeros({1, 1, 4})), DimensionError);
}

TEST(AttachSpecialTokens, SlotsAndOrigin) {
  Rng rng(6);
  Tensor patches = random_tensor({2, 3, 4}, rng);
  Tensor meta = random_tensor({1, 4}, rng), views = random_tensor({2, 4}, rng);
  TokenSequence seq = attach_special_tokens(patches, {View::Ground, View::Aerial}, meta, views);
  EXPECT_EQ(seq.tokens.shape(), (Shape{2, 5, 4}));
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(seq.tokens[(0 * 5 + kMetaSlot) * 4 + c], meta[c]);
    EXPECT_EQ(seq.tokens[(0 * 5 + kViewSlot) * 4 + c], views[4 + c]);
    EXPECT_EQ(seq.tokens[(1 * 5 + kViewSlot) * 4 + c], views[c]);
    EXPECT_EQ(seq.tokens[(1 * 5 + kFirstPatchSlot + 2) * 4 + c], patches[(1 * 3 + 2) * 4 + c]);
  }
  for (const auto& o : seq.origin) EXPECT_EQ(o, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(PoolPatches, UniformGateEqualsPlainMean) {
  Rng rng(7);
  Tensor t = random_tensor({2, 5, 3}, rng);
  Tensor plain = pool_patches(t);
  Tensor ones = Tensor::full({2, 5}, 1.0);
  Tensor gated = pool_patches(t, &ones);
  for (std::size_t i = 0; i < plain.numel(); ++i) EXPECT_EQ(plain[i], gated[i]);
  double expect = 0.0;
  for (std::size_t s = kFirstPatchSlot; s < 5; ++s) expect += t[s * 3];
  EXPECT_NEAR(plain[0], expect / 3.0, 1e-15);
}

TEST(PoolPatches, AllZeroGateIsNumericError) {
  Tensor gate = Tensor::zeros({1, 4});
  EXPECT_THROW(pool_patches(Tensor::zeros({1, 4, 2}), &gate), NumericError);
}

TEST(BackboneGradient, HelperOpsMatchFiniteDifferences) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = 1 + rng.below(2), l = 3 + rng.below(3), d = 2 + rng.below(3);
    Tensor tokens = random_leaf({b, l, d}, rng);
    Tensor gate = random_tensor({b, l}, rng, 0.5, 1.5);
    Tensor scores = random_leaf({b * 2, l, l}, rng), bias = random_leaf({b, l}, rng);
    EXPECT_LT(gradient_error({tokens}, [](const auto& in) { return weighted_sum(vdt_decouple(in[0])); }), 1e-4);
    EXPECT_LT(gradient_error({tokens}, [](const auto& in) { return weighted_sum(take_slot(in[0], kViewSlot)); }), 1e-4);
    EXPECT_LT(gradient_error({tokens, gate}, [](const auto& in) { return weighted_sum(pool_patches(in[0], &in[1])); }),
              1e-4);
    EXPECT_LT(gradient_error({scores, bias}, [](const auto& in) { return weighted_sum(add_key_bias(in[0], in[1], 2)); }),
              1e-4);
  }
}

TEST(BackboneGradient, EncoderBlockMatchesFiniteDifferences) {
  Rng rng(9);
  BlockParams p = make_block_params(4, rng);
  ParamList named;
  p.append_to(named, "");
  std::vector<Tensor> inputs = {random_leaf({2, 3, 4}, rng), random_leaf({2, 3}, rng)};
  for (const auto& np : named) inputs.push_back(np.tensor);
  EXPECT_LT(gradient_error(inputs, [&p](const auto& in) { return weighted_sum(encoder_block(in[0], p, 2, &in[1])); }),
            1e-4);
}

// Straight-line re-implementation of a one-block model on a single sample,
// written with scalar loops only.
TEST(Backbone, SingleBlockForwardMatchesStraightLineOracle) {
  Rng rng(10);
  ModelConfig c = tiny_config(1, 4, 1, 2);
  ModelParams p = init_model(c, rng);
  // Non-trivial norm and bias values so every term of the block is exercised.
  for (Tensor* t : {&p.blocks[0].ln1_gamma, &p.blocks[0].ln1_beta, &p.blocks[0].b_q, &p.blocks[0].b_k,
                    &p.blocks[0].b_v, &p.blocks[0].b_o, &p.blocks[0].ln2_gamma, &p.blocks[0].ln2_beta,
                    &p.blocks[0].b_fc1, &p.blocks[0].b_fc2, &p.patch_bias, &p.id_bias})
    for (auto& v : t->mutable_data()) v = rng.uniform(-0.5, 0.5) + (t == &p.blocks[0].ln1_gamma ? 1.0 : 0.0);
  Batch batch = random_batch(c, 1, rng);
  batch.views = {View::Ground};
  const ModelOutput out = model_forward(c, p, batch);

  const std::size_t d = 4, L = 4, H = 2, dh = 2, hid = 16, pd = 3;
  using Mat = std::vector<std::vector<double>>;
  auto at = [](const Tensor& t, std::size_t i, std::size_t j) { return t[i * t.dim(1) + j]; };
  Mat x(L, std::vector<double>(d));
  for (std::size_t c2 = 0; c2 < d; ++c2) {
    x[0][c2] = p.meta_token[c2];
    x[1][c2] = at(p.view_tokens, 1, c2);
    for (std::size_t j = 0; j < 2; ++j) {
      double acc = p.patch_bias[c2] + at(p.pos_embed, j, c2);
      for (std::size_t k = 0; k < pd; ++k) acc += batch.grids[j * pd + k] * at(p.patch_proj, k, c2);
      x[2 + j][c2] = acc;
    }
  }
  const BlockParams& bp = p.blocks[0];
  auto norm = [&](const Mat& in, const Tensor& g, const Tensor& b) {
    Mat o = in;
    for (std::size_t i = 0; i < L; ++i) {
      double mu = 0.0, var = 0.0;
      for (double v : in[i]) mu += v;
      mu /= d;
      for (double v : in[i]) var += (v - mu) * (v - mu);
      var /= d;
      for (std::size_t c2 = 0; c2 < d; ++c2) o[i][c2] = (in[i][c2] - mu) / std::sqrt(var + kLayerNormEps) * g[c2] + b[c2];
    }
    return o;
  };
  auto affine = [&](const Mat& in, const Tensor& w, const Tensor& b) {
    Mat o(in.size(), std::vector<double>(w.dim(1)));
    for (std::size_t i = 0; i < in.size(); ++i)
      for (std::size_t j = 0; j < w.dim(1); ++j) {
        double acc = b[j];
        for (std::size_t k = 0; k < w.dim(0); ++k) acc += in[i][k] * at(w, k, j);
        o[i][j] = acc;
      }
    return o;
  };
  Mat n1 = norm(x, bp.ln1_gamma, bp.ln1_beta);
  Mat q = affine(n1, bp.w_q, bp.b_q), k = affine(n1, bp.w_k, bp.b_k), v = affine(n1, bp.w_v, bp.b_v);
  Mat ctx(L, std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t i = 0; i < L; ++i) {
      std::vector<double> logit(L);
      double mx = -1e300, z = 0.0;
      for (std::size_t j = 0; j < L; ++j) {
        double s = 0.0;
        for (std::size_t c2 = 0; c2 < dh; ++c2) s += q[i][h * dh + c2] * k[j][h * dh + c2];
        logit[j] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, logit[j]);
      }
      for (auto& lg : logit) z += (lg = std::exp(lg - mx));
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t c2 = 0; c2 < dh; ++c2) ctx[i][h * dh + c2] += logit[j] / z * v[j][h * dh + c2];
    }
  Mat attn = affine(ctx, bp.w_o, bp.b_o);
  Mat h1 = x;
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t c2 = 0; c2 < d; ++c2) h1[i][c2] += attn[i][c2];
  Mat f1 = affine(norm(h1, bp.ln2_gamma, bp.ln2_beta), bp.w_fc1, bp.b_fc1);
  for (auto& row : f1)
    for (auto& e : row) e = 0.5 * e * (1.0 + std::erf(e / std::sqrt(2.0)));
  ASSERT_EQ(f1[0].size(), hid);
  Mat f2 = affine(f1, bp.w_fc2, bp.b_fc2);
  Mat y = h1;
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t c2 = 0; c2 < d; ++c2) y[i][c2] += f2[i][c2];
  for (std::size_t c2 = 0; c2 < d; ++c2) y[0][c2] -= y[1][c2];

  std::vector<double> feature(d);
  for (std::size_t c2 = 0; c2 < d; ++c2) {
    feature[c2] = y[0][c2] + 0.5 * (y[2][c2] + y[3][c2]);
    EXPECT_NEAR(out.meta_feature[c2], feature[c2], 1e-10);
    EXPECT_NEAR(out.view_feature[c2], y[1][c2], 1e-10);
  }
  for (std::size_t j = 0; j < c.num_identities; ++j) {
    double acc = p.id_bias[j];
    for (std::size_t c2 = 0; c2 < d; ++c2) acc += feature[c2] * at(p.id_head, c2, j);
    EXPECT_NEAR(out.id_logits[j], acc, 1e-10);
  }
}

TEST(Backbone, FullRetentionSelectorMatchesSelectorFreePipeline) {
  Rng cfg_rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig base = tiny_config(1 + cfg_rng.below(3), 4 * (1 + cfg_rng.below(2)), 1 + cfg_rng.below(3),
                                   1 + cfg_rng.below(3));
    ModelConfig sel = base;
    sel.selector = SelectorConfig{.k = base.num_patches(),
                                  .temperature = cfg_rng.uniform(0.1, 2.0),
                                  .num_heads = 2,
                                  .position = 1 + cfg_rng.below(base.num_blocks),
                                  .noise_enabled = false};
    const std::uint64_t seed = cfg_rng.next_u64();
    Rng r1(seed), r2(seed);
    ModelParams p1 = init_model(base, r1), p2 = init_model(sel, r2);
    Rng data_rng(seed + 1);
    const Batch batch = random_batch(base, 1 + cfg_rng.below(3), data_rng);
    ModelOutput a = model_forward(base, p1, batch);
    ModelOutput b = model_forward(sel, p2, batch);
    for (const auto& [x, y] : {std::pair{&a.meta_feature, &b.meta_feature}, {&a.view_feature, &b.view_feature},
                               {&a.id_logits, &b.id_logits}, {&a.view_logits, &b.view_logits}})
      for (std::size_t i = 0; i < x->numel(); ++i) EXPECT_NEAR((*x)[i], (*y)[i], 1e-12) << "trial " << trial;
  }
}

class EndToEndGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(EndToEndGradient, TotalLossMatchesFiniteDifferences) {
  Rng rng(12);
  ModelConfig c = tiny_config(2, 8, 2, 2);
  c.selector = SelectorConfig{.k = 2, .temperature = 1.0, .num_heads = 2, .position = GetParam(), .noise_enabled = true};
  ModelParams p = init_model(c, rng);
  Batch batch = random_batch(c, 2, rng);
  Rng noise(13);
  ModelOutput first = model_forward(c, p, batch, {.training = true, .rng = &noise});
  const FrozenSelection frozen = *freeze_selection(first);
  const double err = gradient_error(
      param_tensors(p),
      [&](const auto&) {
        ModelOutput out = model_forward(c, p, batch, {.training = true, .rng = nullptr, .frozen = &frozen});
        return compute_objective(out, batch, LossWeights{}).total;
      });
  EXPECT_LT(err, 1e-3);
}

INSTANTIATE_TEST_SUITE_P(SelectorPositions, EndToEndGradient, ::testing::Values(1, 2));

TEST(Backbone, MismatchedGridIsDimensionError) {
  Rng rng(14);
  ModelConfig c = tiny_config(1, 4, 2, 2);
  ModelParams p = init_model(c, rng);
  Batch batch;
  batch.grids = Tensor::zeros({1, 2, 3, 3});
  batch.views = {View::Aerial};
  batch.ids = {0};
  EXPECT_THROW(model_forward(c, p, batch), DimensionError);
}
