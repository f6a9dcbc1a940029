#include <gtest/gtest.h>

#include <sstream>

#include "dtst/config.hpp"

using namespace dtst;

namespace {

ExperimentConfig parse_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in, "test.cfg");
}

std::string parse_error(const std::string& text) {
  try {
    parse_text(text);
  } catch (const ParseError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, SeedOnlyAppliesDefaults) {
  const ExperimentConfig cfg = parse_text("seed = 17\n");
  EXPECT_EQ(cfg.seed, 17u);
  EXPECT_EQ(cfg.num_blocks, 4u);
  EXPECT_EQ(cfg.embed_dim, 32u);
  EXPECT_EQ(cfg.data.num_ids, 32u);
  EXPECT_EQ(cfg.data.k_sig, 3u);
  EXPECT_EQ(cfg.train.epochs, 30u);
  EXPECT_EQ(cfg.train.lr_max, 8e-3);
  EXPECT_EQ(cfg.train.lr_min, 1.6e-6);
  EXPECT_NO_THROW(cfg.validate());
}

TEST(Config, EchoRoundTripsToIdenticalConfig) {
  ExperimentConfig cfg = parse_text(
      "seed = 3\nselector.temperature = 0.1\nselector.position = second_to_last\n"
      "eval.protocols = A<->G, ALL\nablate.positions = last, 2\ntrain.lr_max = 0.0123456789012345\n"
      "eval.checkpoint = runs/a b/checkpoint.bin\n");
  const std::string echo = echo_config(cfg);
  const ExperimentConfig back = parse_text(echo);
  EXPECT_EQ(echo_config(back), echo);
  EXPECT_EQ(back.train.lr_max, 0.0123456789012345);
  EXPECT_EQ(back.selector_position, PositionSpec::parse("second_to_last"));
  EXPECT_EQ(back.eval_protocols, (std::vector<Protocol>{Protocol::AerialGround, Protocol::All}));
  EXPECT_EQ(back.eval_checkpoint, "runs/a b/checkpoint.bin");
  EXPECT_EQ(back.ablate, cfg.ablate);
}

TEST(Config, ZeroKViolatesSelectorInvariant) {
  const ExperimentConfig cfg = parse_text("seed = 1\nselector.k = 0\n");
  try {
    cfg.validate();
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("SelectorConfig.K"), std::string::npos) << e.what();
  }
}

TEST(Config, DefaultSelectorBlockMatchesTwoHeadTopTwoLastLayer) {
  const ExperimentConfig cfg = parse_text("seed = 1\nselector.heads = 2\nselector.k = 2\nselector.position = last\n");
  const ExperimentConfig defaults = parse_text("seed = 1\n");
  EXPECT_EQ(echo_config(cfg), echo_config(defaults));
  const auto sel = cfg.selector_config();
  ASSERT_TRUE(sel.has_value());
  EXPECT_EQ(sel->num_heads, 2u);
  EXPECT_EQ(sel->k, 2u);
  EXPECT_EQ(sel->position, cfg.num_blocks);
  EXPECT_EQ(SelectorConfig{}.position, ModelConfig{}.num_blocks);
}

TEST(Config, PositionSemantics) {
  EXPECT_EQ(PositionSpec::parse("last").resolve(4), 4u);
  EXPECT_EQ(PositionSpec::parse("second_to_last").resolve(4), 3u);
  EXPECT_EQ(PositionSpec::parse("2").resolve(4), 2u);
  EXPECT_THROW(PositionSpec::parse("first"), ConfigError);
  EXPECT_THROW(PositionSpec::parse("second_to_last").resolve(1), ConfigError);
}

TEST(Config, UnknownKeyReportsLineNumber) {
  const std::string msg = parse_error("seed = 1\n# comment\n\nselector.kk = 3\n");
  EXPECT_NE(msg.find("test.cfg:4"), std::string::npos) << msg;
  EXPECT_NE(msg.find("selector.kk"), std::string::npos) << msg;
}

TEST(Config, TypeMismatchReportsLineNumber) {
  const std::string msg = parse_error("seed = 1\nmodel.embed_dim = wide\n");
  EXPECT_NE(msg.find("test.cfg:2"), std::string::npos) << msg;
}

TEST(Config, MissingRequiredKeyIsParseError) {
  EXPECT_NE(parse_error("model.num_blocks = 2\n").find("seed"), std::string::npos);
}

TEST(Config, DuplicateKeyIsParseError) {
  EXPECT_NE(parse_error("seed = 1\nseed = 2\n").find("duplicate"), std::string::npos);
}

TEST(Config, MissingEqualsIsParseError) {
  EXPECT_NE(parse_error("seed 1\n").find("test.cfg:1"), std::string::npos);
}

TEST(Config, CommentsAndWhitespaceAreIgnored) {
  const ExperimentConfig cfg = parse_text("  seed=9   # master seed\n\tselector.enabled = false\n");
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_FALSE(cfg.selector_config().has_value());
}

TEST(Config, InvalidFieldsFailValidation) {
  EXPECT_THROW(parse_text("seed = 1\nmodel.attn_heads = 5\n").validate(), ConfigError);
  EXPECT_THROW(parse_text("seed = 1\ntrain.lr_min = 0.1\n").validate(), ConfigError);
  EXPECT_THROW(parse_text("seed = 1\ndata.k_sig = 16\n").validate(), ConfigError);
  EXPECT_THROW(parse_text("seed = 1\nloss.lambda_orth = -1\n").validate(), ConfigError);
  EXPECT_THROW(parse_text("seed = 1\nselector.position = 9\n").validate(), ConfigError);
}

TEST(Config, AblationGridBounds) {
  AblationGrid g;
  EXPECT_EQ(g.cells(), 4u);
  g.heads = {};
  EXPECT_THROW(g.validate(), ConfigError);
  g.heads = {1, 2, 4, 8, 16};
  g.ks = {1, 2, 3, 4, 5};
  g.positions = {PositionSpec::parse("1"), PositionSpec::parse("2"), PositionSpec::parse("last")};
  EXPECT_THROW(g.validate(), ConfigError);
}

TEST(Config, LoadMissingFileIsIoError) { EXPECT_THROW(load_config("/nonexistent/dtst.cfg"), IoError); }
