// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "lion/multifuse.hpp"
#include "test_util.hpp"

using namespace lion;
using namespace lion::testing;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.num_blocks = 2;
  c.channels = 16;
  c.heads = 2;
  c.frames = 2;
  c.frame_size = 8;
  c.patch_size = 4;
  c.diffusion_steps = 50;
  return c;
}

AdapterSet<double> random_adapter(std::uint64_t seed, std::string name) {
  auto set = init_adapter<double>(small_config(), 2, seed, std::move(name));
  std::uint64_t k = seed * 1000;
  for (auto& [id, pt] : set.points) {
    pt.a = random_tensor<double>(pt.a.shape(), ++k, -0.5, 0.5);
    pt.b = random_tensor<double>(pt.b.shape(), ++k, -0.5, 0.5);
  }
  return set;
}

struct Fixture {
  ModelConfig cfg = small_config();
  ToyDiT<double> model = ToyDiT<double>::init(cfg, 3);
  AdapterSet<double> a = random_adapter(1, "a");
  AdapterSet<double> b = random_adapter(2, "b");
  Tensor<double> ea = random_tensor<double>({1, 16}, 11);
  Tensor<double> eb = random_tensor<double>({1, 16}, 12);
  Tensor<double> noisy = random_tensor<double>({2, 8, 8}, 21);
  Tensor<double> cond = random_tensor<double>({8, 8}, 22);

  FusedContext<double> context(std::vector<const AdapterSet<double>*> ads, std::vector<Tensor<double>> toks,
                               FusionMode mode = FusionMode::vanilla) const {
    FusedContext<double> ctx;
    ctx.plan.adapters = std::move(ads);
    ctx.plan.mode = mode;
    ctx.tokens = std::move(toks);
    return ctx;
  }
};

}  // namespace

TEST(AugmentedSequence, RowsFollowDeclarationOrder) {
  const auto h = random_tensor<double>({5, 4}, 1);
  const auto e1 = random_tensor<double>({1, 4}, 2), e2 = random_tensor<double>({1, 4}, 3);
  const auto s = build_augmented_sequence(h, {e1, e2});
  ASSERT_EQ(s.shape(), (Shape{7, 4}));
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(s(0, c), h(0, c));
    EXPECT_EQ(s(4, c), h(4, c));
    EXPECT_EQ(s(5, c), e1(0, c));
    EXPECT_EQ(s(6, c), e2(0, c));
  }
  EXPECT_THROW(build_augmented_sequence(h, {random_tensor<double>({1, 3}, 4)}), DimensionError);
  EXPECT_THROW(build_augmented_sequence<double>(h, {}), FusionError);
}

TEST(PartitionedAttention, SingleAdapterMatchesPlainForward) {
  Fixture f;
  for (auto mode : {FusionMode::vanilla, FusionMode::norm_consistent}) {
    const auto ctx = f.context({&f.a}, {f.ea}, mode);
    const auto specs = branch_specs(ctx, f.cfg);
    const auto fused = fused_predict_noise(f.model, f.noisy, f.cond, 7, specs);
    auto single = branch_spec(f.a, f.cfg, 1.0);
    single.token = f.ea;
    const auto plain = predict_noise(f.model, f.noisy, f.cond, 7, &single);
    EXPECT_LT(max_abs_diff(fused, plain), 1e-9);
  }
}

TEST(PartitionedAttention, AttentionOnlyWithOneAdapterMatchesFullBlock) {
  Fixture f;
  const auto specs = branch_specs(f.context({&f.a}, {f.ea}), f.cfg);
  const auto full = fused_predict_noise(f.model, f.noisy, f.cond, 7, specs, AveragingScope::full_block);
  const auto attn = fused_predict_noise(f.model, f.noisy, f.cond, 7, specs, AveragingScope::attention_only);
  EXPECT_LT(max_abs_diff(full, attn), 1e-12);
}

TEST(PartitionedAttention, IdenticalAdaptersEqualOne) {
  Fixture f;
  const auto one = fused_predict_noise(f.model, f.noisy, f.cond, 9, branch_specs(f.context({&f.a}, {f.ea}), f.cfg));
  const auto two = fused_predict_noise(f.model, f.noisy, f.cond, 9,
                                       branch_specs(f.context({&f.a, &f.a}, {f.ea, f.ea}), f.cfg));
  EXPECT_LT(max_abs_diff(one, two), 1e-12);
}

TEST(PartitionedAttention, PermutationInvariant) {
  Fixture f;
  for (auto scope : {AveragingScope::full_block, AveragingScope::attention_only}) {
    const auto ab = fused_predict_noise(f.model, f.noisy, f.cond, 4,
                                        branch_specs(f.context({&f.a, &f.b}, {f.ea, f.eb}), f.cfg), scope);
    const auto ba = fused_predict_noise(f.model, f.noisy, f.cond, 4,
                                        branch_specs(f.context({&f.b, &f.a}, {f.eb, f.ea}), f.cfg), scope);
    EXPECT_LT(max_abs_diff(ab, ba), 1e-12);
  }
}

// Oracle: each branch through the ordinary single-stream block on its own
// [H; E_i], shared rows averaged by hand.
TEST(PartitionedAttention, SharedRowsAreBranchMean) {
  Fixture f;
  Tape<double> tape;
  auto bm = bind_model(tape, f.model);
  const auto ctx = f.context({&f.a, &f.b}, {f.ea, f.eb});
  const auto specs = branch_specs(ctx, f.cfg);
  std::vector<Injection<double>> inj{bind_injection(tape, specs[0]), bind_injection(tape, specs[1])};
  const auto h = tape.constant(random_tensor<double>({std::size_t(f.cfg.tokens()), 16}, 31));
  std::vector<Var<double>> toks{tape.constant(f.ea), tape.constant(f.eb)};

  const auto out = partitioned_attention_block(bm, 1, h, toks, inj);
  const std::size_t n = std::size_t(f.cfg.tokens());
  ASSERT_EQ(out.shared.shape(), (Shape{n, 16}));
  ASSERT_EQ(out.tokens.size(), 2u);

  std::vector<Tensor<double>> ys;
  for (std::size_t i = 0; i < 2; ++i)
    ys.push_back(transformer_block(bm, 1, ad::concat_rows<double>({h, toks[i]}), &inj[i]).value());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < 16; ++c)
      EXPECT_NEAR(out.shared.value()(r, c), 0.5 * (ys[0](r, c) + ys[1](r, c)), 1e-12);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(out.tokens[i].value()(0, c), ys[i](n, c), 1e-12);
}

TEST(PartitionedAttention, TokenRowsDoNotSeeOtherBranches) {
  Fixture f;
  Tape<double> tape;
  auto bm = bind_model(tape, f.model);
  const auto specs = branch_specs(f.context({&f.a, &f.b}, {f.ea, f.eb}), f.cfg);
  std::vector<Injection<double>> inj{bind_injection(tape, specs[0]), bind_injection(tape, specs[1])};
  const auto h = tape.constant(random_tensor<double>({std::size_t(f.cfg.tokens()), 16}, 31));
  const auto first = partitioned_attention_block(bm, 0, h, {tape.constant(f.ea), tape.constant(f.eb)}, inj);
  const auto moved = partitioned_attention_block(
      bm, 0, h, {tape.constant(f.ea), tape.constant(random_tensor<double>({1, 16}, 99))}, inj);
  EXPECT_EQ(first.tokens[0].value(), moved.tokens[0].value());
  EXPECT_GT(max_abs_diff(first.shared.value(), moved.shared.value()), 1e-6);
}

TEST(FusedForward, OutputShapeAndFinalTokens) {
  Fixture f;
  Tape<double> tape;
  auto bm = bind_model(tape, f.model);
  const auto specs = branch_specs(f.context({&f.a, &f.b}, {f.ea, f.eb}), f.cfg);
  std::vector<Injection<double>> inj{bind_injection(tape, specs[0]), bind_injection(tape, specs[1])};
  std::vector<Var<double>> final_tokens;
  const auto eps = fused_forward(bm, patchify(f.noisy, f.cfg), f.cond, 3, inj,
                                 {tape.constant(f.ea), tape.constant(f.eb)}, AveragingScope::full_block,
                                 &final_tokens);
  EXPECT_EQ(eps.shape(), (Shape{std::size_t(f.cfg.tokens() - 1), std::size_t(f.cfg.patch_dim())}));
  ASSERT_EQ(final_tokens.size(), 2u);
  for (const auto& t : final_tokens) EXPECT_EQ(t.shape(), (Shape{1, 16}));
}

TEST(FusedContext, ValidationErrors) {
  Fixture f;
  EXPECT_THROW(f.context({}, {}).validate(f.cfg), FusionError);
  EXPECT_THROW(f.context({&f.a, &f.b}, {f.ea}).validate(f.cfg), FusionError);
  EXPECT_THROW(f.context({&f.a}, {random_tensor<double>({1, 8}, 1)}).validate(f.cfg), DimensionError);
  EXPECT_NO_THROW(f.context({&f.a, &f.b}, {f.ea, f.eb}).validate(f.cfg));
}

TEST(FusedSample, DeterministicAndBounded) {
  Fixture f;
  const auto ctx = f.context({&f.a, &f.b}, {f.ea, f.eb}, FusionMode::norm_consistent);
  const auto cond = random_tensor<double>({8, 8}, 5, 0.0, 1.0);
  const auto x = fused_ddim_sample(f.model, cond, 3, ctx, 17);
  const auto y = fused_ddim_sample(f.model, cond, 3, ctx, 17);
  EXPECT_EQ(x, y);
  EXPECT_EQ(x.shape(), (Shape{2, 8, 8}));
  for (double v : x.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}
