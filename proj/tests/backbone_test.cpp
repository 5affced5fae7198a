#include <gtest/gtest.h>

#include "dept/backbone.hpp"
#include "dept/checkpoint.hpp"
#include "dept/error.hpp"
#include "dept/ops.hpp"

namespace dept {
namespace {

BackboneConfig tiny(std::size_t layers = 2) {
  BackboneConfig c;
  c.vocab_size = 16;
  c.d_model = 8;
  c.n_layers = layers;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq_len = 8;
  c.max_prompt_len = 4;
  return c;
}

std::vector<float> values(const Tensor<float>& t) { return {t.data().begin(), t.data().end()}; }

TEST(BackboneConfig, Validation) {
  auto c = tiny();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.max_seq_len = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(tiny().validate());
}

TEST(TokenBatch, RightPadsAndMasks) {
  auto b = TokenBatch::from_sequences({{3, 4, 5}, {6}});
  EXPECT_EQ(b.length, 3u);
  EXPECT_EQ(b.ids, (std::vector<std::int32_t>{3, 4, 5, 6, 0, 0}));
  EXPECT_EQ(b.row_length(1), 1u);
  EXPECT_EQ(b.pad_mask(), (std::vector<std::uint8_t>{0, 0, 0, 0, 1, 1}));
  EXPECT_THROW(TokenBatch::from_sequences({}), DegenerateInputError);
}

TEST(Backbone, SingleTokenShape) {
  auto m = Backbone<float>::init(tiny(1), 1);
  auto logits = m.forward_ids(TokenBatch::from_sequences({{3}}));
  EXPECT_EQ(logits.shape(), (Shape{1, 1, 16}));
}

TEST(Backbone, Deterministic) {
  auto a = Backbone<float>::init(tiny(), 9);
  auto b = Backbone<float>::init(tiny(), 9);
  const auto ids = TokenBatch::from_sequences({{1, 2, 3, 4}});
  EXPECT_EQ(values(a.forward_ids(ids)), values(b.forward_ids(ids)));
  EXPECT_EQ(values(a.forward_ids(ids)), values(a.forward_ids(ids)));
}

TEST(Backbone, CausalPerturbation) {
  auto m = Backbone<float>::init(tiny(), 2);
  const std::size_t n = 6, v = 16;
  for (std::size_t t = 0; t + 1 < n; ++t) {
    std::vector<std::int32_t> base = {3, 7, 2, 9, 11, 5};
    auto perturbed = base;
    for (std::size_t j = t + 1; j < n; ++j) perturbed[j] = (perturbed[j] % 14) + 1;
    const auto a = values(m.forward_ids(TokenBatch::from_sequences({base})));
    const auto b = values(m.forward_ids(TokenBatch::from_sequences({perturbed})));
    for (std::size_t i = 0; i < (t + 1) * v; ++i) ASSERT_EQ(a[i], b[i]) << "position " << i / v;
  }
  // Changing position 3 leaves 0..2 untouched but moves 3.
  const auto a = values(m.forward_ids(TokenBatch::from_sequences({{3, 7, 2, 9, 11}})));
  const auto b = values(m.forward_ids(TokenBatch::from_sequences({{3, 7, 2, 10, 11}})));
  for (std::size_t i = 0; i < 3 * v; ++i) EXPECT_EQ(a[i], b[i]);
  bool moved = false;
  for (std::size_t i = 3 * v; i < 4 * v; ++i) moved |= a[i] != b[i];
  EXPECT_TRUE(moved);
}

TEST(Backbone, OverlongSequenceIsLengthError) {
  auto m = Backbone<float>::init(tiny(), 1);
  std::vector<std::int32_t> ids(9, 2);
  EXPECT_THROW(m.forward_ids(TokenBatch::from_sequences({ids})), LengthError);
  auto embeds = Tensor<float>::zeros({1, 13, 8});
  EXPECT_THROW(m.forward_embeds(embeds, 4), LengthError);
}

TEST(Backbone, ForwardEmbedsWithoutPromptMatchesForwardIds) {
  auto m = Backbone<float>::init(tiny(), 4);
  const auto ids = TokenBatch::from_sequences({{1, 2, 3}, {4, 5}});
  const auto mask = ids.pad_mask();
  EXPECT_EQ(values(m.forward_ids(ids)), values(m.forward_embeds(m.embed(ids), 0, mask)));
}

TEST(Backbone, ComposedLengthShape) {
  auto m = Backbone<float>::init(tiny(), 4);
  auto embeds = Tensor<float>::zeros({2, 12, 8});
  EXPECT_EQ(m.forward_embeds(embeds, 4).shape(), (Shape{2, 12, 16}));
}

TEST(Backbone, GradientReachesEmbedsButNotFrozenWeights) {
  auto m = Backbone<float>::init(tiny(), 4);
  m.freeze();
  auto embeds = m.embed(TokenBatch::from_sequences({{1, 2, 3}})).detach(true);
  auto logits = m.forward_embeds(embeds, 0);
  ops::sum(logits).backward();
  EXPECT_TRUE(embeds.has_grad());
  for (const auto& p : m.named_parameters()) EXPECT_FALSE(p.tensor.has_grad()) << p.name;
}

TEST(Backbone, ParameterCounts) {
  BackboneConfig c = tiny(1);
  c.vocab_size = 8;
  c.d_model = 4;
  auto m = Backbone<float>::init(c, 1);
  std::size_t embedding = 0;
  for (const auto& p : m.named_parameters()) {
    if (p.name == "token_embedding") embedding = p.tensor.numel();
  }
  EXPECT_EQ(embedding, 32u);
  const auto one = m.count_params();
  EXPECT_EQ(one.frozen, 0u);
  m.freeze();
  EXPECT_EQ(m.count_params().trainable, 0u);
  EXPECT_EQ(m.count_params().frozen, one.trainable);

  BackboneConfig c2 = c;
  c2.n_layers = 2;
  const auto two = Backbone<float>::init(c2, 1).count_params();
  const std::size_t d = c.d_model, ff = c.d_ff;
  EXPECT_EQ(c.params_per_layer(), 4 * d * d + 2 * d * ff + 9 * d + ff);
  EXPECT_EQ(two.total() - one.total(), c.params_per_layer());
}

TEST(Backbone, FreezeTogglesEveryTensor) {
  auto m = Backbone<float>::init(tiny(), 1);
  m.freeze();
  for (const auto& p : m.parameters()) EXPECT_FALSE(p.requires_grad());
  m.unfreeze();
  for (const auto& p : m.parameters()) EXPECT_TRUE(p.requires_grad());
}

TEST(Backbone, CheckpointRoundTripIsBitExact) {
  auto m = Backbone<float>::init(tiny(), 5);
  const auto bytes = encode_checkpoint(m.to_checkpoint());
  auto loaded = Backbone<float>::from_checkpoint(decode_checkpoint(bytes));
  EXPECT_TRUE(loaded.frozen());
  EXPECT_EQ(loaded.config(), m.config());
  EXPECT_EQ(encode_checkpoint(loaded.to_checkpoint()), bytes);
}

TEST(Backbone, CastToDoubleKeepsOutputs) {
  auto m = Backbone<float>::init(tiny(), 6);
  auto md = m.cast<double>();
  const auto ids = TokenBatch::from_sequences({{1, 2, 3, 4}});
  const auto a = m.forward_ids(ids);
  const auto b = md.forward_ids(ids);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-4);
}

TEST(Checkpoint, LayoutAndErrors) {
  Checkpoint c;
  c.add("x", {2}, {1.5f, -2.0f});
  const auto bytes = encode_checkpoint(c);
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "DEPTCKPT");
  // magic 8 + version 4 + count 4 + name len 4 + "x" + rank 4 + dim 8 + 2 floats
  EXPECT_EQ(bytes.size(), 8u + 4 + 4 + 4 + 1 + 4 + 8 + 8);
  EXPECT_EQ(bytes[8], 1);  // version, little-endian
  auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.at("x").values, (std::vector<float>{1.5f, -2.0f}));

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), CheckpointError);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode_checkpoint(truncated), CheckpointError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_checkpoint(trailing), CheckpointError);
  EXPECT_THROW(c.at("missing"), CheckpointError);
}

}  // namespace
}  // namespace dept
