#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "dept/error.hpp"
#include "dept/ops.hpp"
#include "dept/peft.hpp"

namespace dept {
namespace {

BackboneConfig small_cfg() {
  BackboneConfig c;
  c.vocab_size = 32;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq_len = 6;
  c.max_prompt_len = 8;
  return c;
}

Backbone<float> frozen_backbone(const BackboneConfig& c, std::uint64_t seed = 3) {
  auto b = Backbone<float>::init(c, seed);
  b.freeze();
  return b;
}

std::vector<float> values(const Tensor<float>& t) { return {t.data().begin(), t.data().end()}; }

TEST(SolveBudget, ReferenceConfiguration) {
  const auto sol = solve_budget(100, 768, 256, 40);
  EXPECT_EQ(sol.r, 45u);
  EXPECT_EQ(sol.trainable_params, 76800u);
  EXPECT_EQ(sol.budget, 76800u);
  EXPECT_EQ(sol.slack, 0u);
}

TEST(SolveBudget, DegenerateAndInexactCases) {
  auto sol = solve_budget(100, 768, 256, 100);
  EXPECT_EQ(sol.r, 0u);
  EXPECT_EQ(sol.slack, 0u);
  sol = solve_budget(100, 768, 256, 20);
  EXPECT_EQ(sol.r, 60u);
  EXPECT_EQ(sol.trainable_params, 76800u);
  EXPECT_EQ(sol.slack, 0u);
  sol = solve_budget(100, 768, 250, 20);
  EXPECT_EQ(sol.r, 60u);
  EXPECT_EQ(sol.trainable_params, 76440u);
  EXPECT_EQ(sol.slack, 360u);
  EXPECT_THROW(solve_budget(10, 8, 8, 11), BudgetError);
}

TEST(SolveBudget, ParityAndMonotoneProperties) {
  for (std::size_t d : {4u, 8u, 64u, 768u}) {
    for (std::size_t s : {4u, 6u, 64u, 256u}) {
      for (std::size_t l : {1u, 10u, 20u, 100u}) {
        std::size_t prev_r = std::numeric_limits<std::size_t>::max();
        for (std::size_t m = 0; m <= l; ++m) {
          const auto sol = solve_budget(l, d, s, m);
          // r is the largest rank that fits.
          EXPECT_LE(sol.trainable_params, l * d);
          EXPECT_GT(m * d + (s + d) * (sol.r + 1), l * d);
          EXPECT_EQ(sol.slack, l * d - sol.trainable_params);
          if (((l - m) * d) % (s + d) == 0) {
            EXPECT_EQ(sol.trainable_params, l * d);
          }
          EXPECT_LE(sol.r, prev_r);
          prev_r = sol.r;
        }
      }
    }
  }
}

TEST(TrainableParams, ReferenceCounts) {
  auto vanilla = PeftVariant<float>::vanilla({Tensor<float>::zeros({100, 768}, true)}, 0.3);
  EXPECT_EQ(vanilla.trainable_params(), 76800u);

  auto make = [](std::size_t m, std::size_t r) {
    DeptParams<float> p;
    p.m = m;
    p.r = r;
    p.s = 256;
    p.d = 768;
    if (m) p.prompt = Tensor<float>::zeros({m, 768}, true);
    if (r) {
      p.lowrank_a = Tensor<float>::zeros({256, r}, true);
      p.lowrank_b = Tensor<float>::zeros({r, 768}, true);
    }
    return PeftVariant<float>::dept(p, 0.3, 5e-4, 100);
  };
  EXPECT_EQ(make(40, 45).trainable_params(), 76800u);
  EXPECT_EQ(make(0, 75).trainable_params(), 76800u);
  EXPECT_EQ(trainable_params(make(40, 45)), 76800u);
}

TEST(InitDept, ZeroProductAndDeterminism) {
  const auto bb = frozen_backbone(small_cfg());
  const auto a = init_dept(bb, 2, 3, 0.02, 11);
  const auto b = init_dept(bb, 2, 3, 0.02, 11);
  for (float v : values(a.lowrank_b)) EXPECT_EQ(v, 0.0f);
  for (float v : values(a.delta())) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(values(a.lowrank_a), values(b.lowrank_a));
  EXPECT_EQ(values(a.prompt), values(b.prompt));
  EXPECT_EQ(a.lowrank_a.shape(), (Shape{6, 3}));
  EXPECT_EQ(a.lowrank_b.shape(), (Shape{3, 8}));
  EXPECT_NE(values(init_dept(bb, 2, 3, 0.02, 12).lowrank_a), values(a.lowrank_a));
}

TEST(InitDept, GaussianMeanStatistic) {
  BackboneConfig c;
  c.vocab_size = 16;
  c.d_model = 256;
  c.n_layers = 1;
  c.n_heads = 4;
  c.d_ff = 8;
  c.max_seq_len = 400;
  c.max_prompt_len = 1;
  const auto bb = frozen_backbone(c);
  const double sigma = 0.02;
  const auto p = init_dept(bb, 0, 250, sigma, 5);
  const auto a = values(p.lowrank_a);
  ASSERT_EQ(a.size(), 100000u);
  const double mean = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
  EXPECT_LT(std::abs(mean), 3 * sigma / std::sqrt(1e5));
  double var = 0;
  for (float v : a) var += (v - mean) * (v - mean);
  EXPECT_NEAR(std::sqrt(var / static_cast<double>(a.size())), sigma, 0.01 * sigma * 10);
}

TEST(InitDept, Errors) {
  const auto bb = frozen_backbone(small_cfg());
  EXPECT_THROW(init_dept(bb, 2, 7, 0.02, 1), RankError);  // min(s=6, d=8) = 6
  EXPECT_THROW(init_dept(bb, 9, 1, 0.02, 1), LengthError);
  EXPECT_THROW(init_dept(bb, 0, 0, 0.02, 1), ConfigError);
  EXPECT_NO_THROW(init_dept(bb, 0, 6, 0.02, 1));
}

TEST(InitPrompt, SampleVocabRows) {
  std::vector<float> data(10 * 4);
  std::iota(data.begin(), data.end(), 0.0f);
  Tensor<float> table({10, 4}, data);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto p = init_prompt(table, 6, PromptInit::kSampleVocabRows, seed);
    EXPECT_TRUE(p.requires_grad());
    std::set<int> rows;
    for (std::size_t i = 0; i < 6; ++i) {
      const float first = p.data()[i * 4];
      const int row = static_cast<int>(first) / 4;
      ASSERT_EQ(first, static_cast<float>(row * 4));
      for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(p.data()[i * 4 + j], data[row * 4 + j]);
      rows.insert(row);
    }
    EXPECT_EQ(rows.size(), 6u) << "sampled rows must be distinct";
  }
  EXPECT_THROW(init_prompt(table, 11, PromptInit::kSampleVocabRows, 1), ConfigError);
}

TEST(InitPrompt, SamplesOnlyTopRows) {
  std::vector<float> data(6000);
  std::iota(data.begin(), data.end(), 0.0f);
  Tensor<float> table({6000, 1}, data);
  const auto p = init_prompt(table, 200, PromptInit::kSampleVocabRows, 4);
  for (float v : values(p)) EXPECT_LT(v, static_cast<float>(kPromptInitTopVocab));
}

TEST(InitPrompt, GaussianIsSeeded) {
  const auto table = Tensor<float>::zeros({10, 4});
  EXPECT_EQ(values(init_prompt(table, 3, PromptInit::kRandomGaussian, 8)),
            values(init_prompt(table, 3, PromptInit::kRandomGaussian, 8)));
}

TEST(ComposeVanilla, ShapeAndFrozenTable) {
  const auto bb = frozen_backbone(small_cfg());
  PromptParams<float> p{init_prompt(bb.token_embedding(), 2, PromptInit::kRandomGaussian, 1)};
  const auto ids = TokenBatch::from_sequences({{4, 5, 6}});
  const auto in = compose_vanilla(bb, p, ids);
  EXPECT_EQ(in.embeds.shape(), (Shape{1, 5, 8}));
  EXPECT_EQ(in.prompt_len, 2u);
  EXPECT_EQ(in.last_rows, (std::vector<std::int32_t>{4}));
  ops::sum(bb.forward_embeds(in.embeds, in.prompt_len, in.key_is_pad)).backward();
  EXPECT_TRUE(p.prompt.has_grad());
  EXPECT_FALSE(bb.token_embedding().has_grad());
}

TEST(ComposeVanilla, EmptyPromptIsPlainLookup) {
  const auto bb = frozen_backbone(small_cfg());
  const auto ids = TokenBatch::from_sequences({{4, 5, 6}, {7}});
  const auto in = compose_vanilla(bb, PromptParams<float>{}, ids);
  EXPECT_EQ(in.prompt_len, 0u);
  EXPECT_EQ(values(in.embeds), values(bb.embed(ids)));
}

TEST(ComposeVanilla, OverflowIsLengthError) {
  const auto bb = frozen_backbone(small_cfg());
  PromptParams<float> p{init_prompt(bb.token_embedding(), 2, PromptInit::kRandomGaussian, 1)};
  std::vector<std::int32_t> long_ids(7, 3);
  EXPECT_THROW(compose_vanilla(bb, p, TokenBatch::from_sequences({long_ids})), LengthError);
}

TEST(ComposeDept, ZeroInitMatchesVanilla) {
  const auto bb = frozen_backbone(small_cfg());
  const auto params = init_dept(bb, 3, 2, 0.02, 7);
  const auto ids = TokenBatch::from_sequences({{4, 5, 6, 7}, {8, 9}});
  const auto dept = compose_dept(bb, params, ids);
  const auto vanilla = compose_vanilla(bb, PromptParams<float>{params.prompt}, ids);
  EXPECT_EQ(values(dept.embeds), values(vanilla.embeds));
  EXPECT_EQ(dept.key_is_pad, vanilla.key_is_pad);
}

TEST(ComposeDept, HandDeltaExample) {
  BackboneConfig c;
  c.vocab_size = 16;
  c.d_model = 3;
  c.n_layers = 1;
  c.n_heads = 1;
  c.d_ff = 4;
  c.max_seq_len = 4;
  c.max_prompt_len = 2;
  const auto bb = frozen_backbone(c);
  DeptParams<float> p;
  p.m = 0;
  p.r = 2;
  p.s = 4;
  p.d = 3;
  p.lowrank_a = Tensor<float>({4, 2}, {1, 0, 0, 1, 1, 1, 0, 0}, true);
  p.lowrank_b = Tensor<float>({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  EXPECT_EQ(values(p.delta()), (std::vector<float>{1, 2, 3, 4, 5, 6, 5, 7, 9, 0, 0, 0}));

  const auto ids = TokenBatch::from_sequences({{2, 3, 4, 5}, {6, 7}});
  const auto in = compose_dept(bb, p, ids);
  const auto w = values(bb.embed(ids));
  const auto delta = values(p.delta());
  const auto got = values(in.embeds);
  ASSERT_EQ(in.embeds.shape(), (Shape{2, 4, 3}));
  EXPECT_EQ(in.prompt_len, 0u);  // m = 0: W' alone
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        const std::size_t k = (b * 4 + i) * 3 + j;
        EXPECT_EQ(got[k], w[k] + delta[i * 3 + j]);
      }
    }
  }
  std::vector<std::int32_t> too_long(5, 2);
  EXPECT_THROW(compose_dept(bb, p, TokenBatch::from_sequences({too_long})), LengthError);
}

TEST(ComposeDept, GradientPartition) {
  const auto bb = frozen_backbone(small_cfg());
  auto params = init_dept(bb, 2, 2, 0.02, 9);
  // Non-zero B so that A also receives a gradient.
  for (auto& v : params.lowrank_b.mutable_data()) v = 0.1f;
  const auto ids = TokenBatch::from_sequences({{4, 5, 6}});
  const auto in = compose_dept(bb, params, ids);
  ops::sum(bb.forward_embeds(in.embeds, in.prompt_len, in.key_is_pad)).backward();
  EXPECT_TRUE(params.prompt.has_grad());
  EXPECT_TRUE(params.lowrank_a.has_grad());
  EXPECT_TRUE(params.lowrank_b.has_grad());
  for (const auto& p : bb.named_parameters()) EXPECT_FALSE(p.tensor.has_grad()) << p.name;
}

TEST(ComposeDept, ZeroInitLogitsEquivalenceProperty) {
  const auto bb = frozen_backbone(small_cfg());
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto params = init_dept(bb, 3, 2, 0.02, seed);
    auto dept = PeftVariant<float>::dept(params, 0.3, 5e-4, 5);
    auto vanilla = PeftVariant<float>::vanilla({params.prompt}, 0.3);
    const auto ids = TokenBatch::from_sequences({{4, 5, 6, 7}, {8, 9, 10}});
    const auto a = dept.compose(bb, ids);
    const auto b = vanilla.compose(bb, ids);
    const auto la = values(bb.forward_embeds(a.embeds, a.prompt_len, a.key_is_pad));
    const auto lb = values(bb.forward_embeds(b.embeds, b.prompt_len, b.key_is_pad));
    for (std::size_t i = 0; i < la.size(); ++i) ASSERT_LE(std::abs(la[i] - lb[i]), 1e-6f);
  }
}

TEST(ComposeDept, ShorterComposedSequenceProperty) {
  const auto cfg = small_cfg();
  for (std::size_t l = 1; l <= cfg.max_prompt_len; ++l) {
    for (std::size_t m = 0; m <= l; ++m) {
      const auto sol = solve_budget(l, cfg.d_model, cfg.max_seq_len, m);
      if (sol.r > 0) {
        EXPECT_LT(m, l);
      }
    }
  }
}

TEST(PeftVariant, ConstructionChecks) {
  EXPECT_THROW(PeftVariant<float>::vanilla(PromptParams<float>{}, 0.3), ConfigError);
  EXPECT_THROW(PeftVariant<float>::vanilla({Tensor<float>::zeros({2, 8}, true)}, 0.0), ConfigError);
  const auto bb = frozen_backbone(small_cfg());
  EXPECT_THROW(PeftVariant<float>::dept(init_dept(bb, 2, 2, 0.02, 1), 0.3, -1.0, 4), ConfigError);
  auto v = PeftVariant<float>::dept(init_dept(bb, 2, 2, 0.02, 1), 0.3, 5e-4, 4);
  EXPECT_GT(v.alpha1(), v.alpha2());
  EXPECT_EQ(v.prompt_group().size(), 1u);
  EXPECT_EQ(v.lowrank_group().size(), 2u);
}

TEST(PeftCheckpoint, RoundTripBytes) {
  const auto bb = frozen_backbone(small_cfg());
  for (auto v : {PeftVariant<float>::dept(init_dept(bb, 2, 2, 0.02, 1), 0.3, 5e-4, 4),
                 PeftVariant<float>::dept(init_dept(bb, 0, 3, 0.02, 1), 0.3, 5e-4, 4),
                 PeftVariant<float>::vanilla({init_prompt(bb.token_embedding(), 4, PromptInit::kSampleVocabRows, 2)}, 0.3)}) {
    const auto bytes = encode_checkpoint(v.to_checkpoint());
    const auto back = PeftVariant<float>::from_checkpoint(decode_checkpoint(bytes), 0.3, 5e-4);
    EXPECT_EQ(back.tag(), v.tag());
    EXPECT_EQ(back.rank(), v.rank());
    EXPECT_EQ(back.prompt_length(), v.prompt_length());
    EXPECT_EQ(encode_checkpoint(back.to_checkpoint()), bytes);
  }
}

TEST(TransferInit, CopiesValuesAndForward) {
  const auto bb = frozen_backbone(small_cfg());
  auto source = PeftVariant<float>::dept(init_dept(bb, 2, 2, 0.02, 1), 0.3, 5e-4, 4);
  auto src_b = source.dept_params().lowrank_b;
  for (auto& v : src_b.mutable_data()) v = 0.05f;
  const auto target = PeftVariant<float>::dept(init_dept(bb, 2, 2, 0.02, 99), 0.4, 1e-3, 4);
  const auto ckpt = source.to_checkpoint();
  const auto moved = transfer_init(target, ckpt);
  EXPECT_EQ(moved.alpha1(), 0.4);
  const auto ids = TokenBatch::from_sequences({{4, 5, 6}});
  const auto a = source.compose(bb, ids);
  const auto b = moved.compose(bb, ids);
  EXPECT_EQ(values(bb.forward_embeds(a.embeds, a.prompt_len, a.key_is_pad)),
            values(bb.forward_embeds(b.embeds, b.prompt_len, b.key_is_pad)));
  // save -> transfer -> save
  EXPECT_EQ(encode_checkpoint(moved.to_checkpoint()), encode_checkpoint(ckpt));
  // target untouched
  EXPECT_NE(values(target.dept_params().prompt), values(moved.dept_params().prompt));
}

TEST(TransferInit, MismatchNamesTensor) {
  BackboneConfig c = small_cfg();
  c.max_prompt_len = 40;
  const auto bb = frozen_backbone(c);
  const auto src = PeftVariant<float>::dept(init_dept(bb, 20, 2, 0.02, 1, PromptInit::kRandomGaussian), 0.3, 5e-4, 40);
  const auto dst = PeftVariant<float>::dept(init_dept(bb, 40, 2, 0.02, 1, PromptInit::kRandomGaussian), 0.3, 5e-4, 40);
  try {
    transfer_init(dst, src.to_checkpoint());
    FAIL() << "expected TransferError";
  } catch (const TransferError& e) {
    EXPECT_NE(std::string(e.what()).find("prompt"), std::string::npos);
  }
  const auto pure = PeftVariant<float>::dept(init_dept(bb, 0, 2, 0.02, 1), 0.3, 5e-4, 40);
  EXPECT_THROW(transfer_init(pure, src.to_checkpoint()), TransferError);
}

TEST(VariantTag, StringRoundTrip) {
  EXPECT_EQ(parse_variant_tag(to_string(VariantTag::kDePT)), VariantTag::kDePT);
  EXPECT_EQ(parse_variant_tag(to_string(VariantTag::kVanillaPT)), VariantTag::kVanillaPT);
  EXPECT_EQ(parse_prompt_init(to_string(PromptInit::kRandomGaussian)), PromptInit::kRandomGaussian);
  EXPECT_THROW(parse_variant_tag("lora"), ConfigError);
}

}  // namespace
}  // namespace dept
