// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "lion/synthbench.hpp"
#include "test_util.hpp"

using namespace lion;
using namespace lion::testing;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.num_blocks = 2;
  c.channels = 16;
  c.heads = 2;
  c.frames = 3;
  c.frame_size = 8;
  c.patch_size = 4;
  c.diffusion_steps = 50;
  return c;
}

ClipSampler small_sampler() { return {12, 3}; }

std::vector<FrameSequence> small_clips(Primitive p, int n = 4) {
  return make_dataset(p, n, 12, 7, {8, 1.0}).clips;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("lion_synth_" + name);
  std::filesystem::remove_all(d);
  return d;
}

}  // namespace

TEST(Primitive, NamesRoundTrip) {
  for (Primitive p : kPrimitives) EXPECT_EQ(parse_primitive(primitive_name(p)), p);
  try {
    parse_primitive("zoom");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("offset_h"), std::string::npos);
  }
}

TEST(Scene, DeterministicAndInsideBounds) {
  const auto a = generate_scene(42), b = generate_scene(42), c = generate_scene(43);
  ASSERT_EQ(a.points.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.points[i].x, b.points[i].x);
    EXPECT_EQ(a.points[i].y, b.points[i].y);
  }
  EXPECT_NE(a.points[0].x, c.points[0].x);
  EXPECT_TRUE(a.points[0].is_object);
  EXPECT_FALSE(a.points[1].is_object);
  for (std::uint64_t s = 0; s < 10000; ++s)
    for (const auto& p : generate_scene(s).points) {
      EXPECT_GE(p.x, -0.6);
      EXPECT_LT(p.x, 0.2);
      EXPECT_GE(p.y, -0.6);
      EXPECT_LT(p.y, 0.2);
      EXPECT_GE(p.intensity, 0.6);
    }
}

TEST(Primitive, FullClipStaysInFrame) {
  // Corners of the placement region under every primitive's last frame.
  for (Primitive kind : kPrimitives) {
    const auto m = MotionPrimitive::preset(kind, 120);
    for (double x : {-0.6, 0.2})
      for (double y : {-0.6, 0.2}) {
        Scene s;
        s.points.push_back({x, y, 1.0, true});
        for (const auto& p : points_at(s, m, 119)) {
          EXPECT_LE(std::abs(p.x), 1.0) << primitive_name(kind);
          EXPECT_LE(std::abs(p.y), 1.0) << primitive_name(kind);
        }
      }
  }
}

TEST(Primitive, MotionGeometry) {
  Scene s;
  s.points = {{0.1, -0.2, 1.0, true}, {-0.3, 0.1, 1.0, false}};
  const int N = 11;
  const auto h = points_at(s, MotionPrimitive::preset(Primitive::offset_h, N), N - 1);
  EXPECT_NEAR(h[0].x - 0.1, 0.7, 1e-12);
  EXPECT_EQ(h[0].y, -0.2);
  const auto v = points_at(s, MotionPrimitive::preset(Primitive::offset_v, N), N - 1);
  EXPECT_NEAR(v[1].y - 0.1, 0.7, 1e-12);
  const auto z = points_at(s, MotionPrimitive::preset(Primitive::forward_back, N), N - 1);
  EXPECT_NEAR(z[0].x, 0.15, 1e-12);
  EXPECT_NEAR(z[0].y, -0.3, 1e-12);
  const auto o = points_at(s, MotionPrimitive::preset(Primitive::orbit, N), N - 1);
  EXPECT_NEAR(std::hypot(o[0].x, o[0].y), std::hypot(0.1, -0.2), 1e-12);
  const auto obj = points_at(s, MotionPrimitive::preset(Primitive::object_motion, N), N - 1);
  EXPECT_NEAR(obj[0].x, 0.8, 1e-12);
  EXPECT_EQ(obj[1].x, -0.3);
  EXPECT_THROW(MotionPrimitive::preset(Primitive::orbit, 1), ConfigError);
}

TEST(Render, GaussianSplatValues) {
  // Point exactly on the centre of pixel (row 2, col 5) of an 8x8 frame.
  Scene s;
  const double F = 8;
  s.points = {{-1 + 5.5 * 2 / F, -1 + 2.5 * 2 / F, 0.8, true}};
  const auto seq = render_frames(s, {}, {0}, {8, 1.5});
  EXPECT_NEAR(seq.frames[2 * 8 + 5], 0.8, 1e-6);
  EXPECT_NEAR(seq.frames[2 * 8 + 6], 0.8 * std::exp(-1.0 / 4.5), 1e-6);
  EXPECT_NEAR(seq.frames[4 * 8 + 6], 0.8 * std::exp(-5.0 / 4.5), 1e-6);
  for (float v : seq.frames.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Render, ClampsAndCountsClippedPoints) {
  Scene s;
  s.points = {{0, 0, 1.0, true}, {0, 0, 1.0, false}, {1.5, 0, 1.0, false}};
  const auto seq = render_frames(s, {}, {0}, {8, 1.5});
  float peak = 0;
  for (float v : seq.frames.data()) peak = std::max(peak, v);
  EXPECT_EQ(peak, 1.0f);
  EXPECT_EQ(seq.provenance.at("clipped_points").get<int>(), 1);
}

TEST(Render, ObjectMotionKeepsBackgroundStatic) {
  Scene s;
  s.points = {{-0.5, -0.5, 1.0, true}, {0.5, 0.5, 1.0, false}};
  const auto clip = render_clip(s, MotionPrimitive::preset(Primitive::object_motion, 20), 20, {16, 1.0});
  // Bottom-right quadrant holds only the background point.
  for (std::size_t f = 1; f < 20; ++f)
    for (std::size_t r = 12; r < 16; ++r)
      for (std::size_t c = 12; c < 16; ++c)
        EXPECT_EQ(clip.frames[(f * 16 + r) * 16 + c], clip.frames[r * 16 + c]);
  const auto path = centroid_trajectory(clip.frames);
  EXPECT_GT(path.back().x, path.front().x);
}

TEST(Render, HorizontalOffsetMovesCentroidRight) {
  const auto clip = render_clip(generate_scene(3), MotionPrimitive::preset(Primitive::offset_h, 30), 30);
  const auto path = centroid_trajectory(clip.frames);
  EXPECT_GT(path.back().x - path.front().x, 3.0);
  EXPECT_NEAR(path.back().y, path.front().y, 0.05);
}

TEST(TrainingPair, UsesSamplerIndices) {
  const auto clip = render_clip(generate_scene(1), MotionPrimitive::preset(Primitive::offset_h, 12), 12, {8, 1.0});
  const auto sampler = small_sampler();
  for (double s : {0.25, 0.5, 1.0}) {
    const auto pair = make_training_pair(clip, sampler, s);
    const auto idx = sample_frame_indices(sampler, s);
    ASSERT_EQ(pair.frames.shape(), (Shape{3, 8, 8}));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 64; ++j)
        EXPECT_EQ(pair.frames[i * 64 + j], clip.frames[std::size_t(idx[i]) * 64 + j]);
  }
  EXPECT_THROW(make_training_pair(clip, sampler, 0.1), RangeError);
  EXPECT_THROW(make_training_pair(clip, ClipSampler{24, 3}, 0.5), ConfigError);
}

TEST(Dataset, WriteReadRoundTripAndCorruption) {
  const auto ds = make_dataset(Primitive::offset_v, 3, 12, 5, {8, 1.0});
  const auto dir = temp_dir("ds");
  const auto manifest = write_dataset(ds, dir, 5);
  EXPECT_EQ(manifest.at("clips").size(), 3u);
  const auto back = read_dataset(dir);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].frames, ds.clips[i].frames);
    EXPECT_EQ(back[i].provenance.at("primitive"), "offset_v");
  }
  {
    std::fstream f(dir / "clip_0001.lw", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-3, std::ios::end);
    f.put('\x5a');
  }
  try {
    read_dataset(dir);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.kind(), ParseErrorKind::checksum);
  }
  std::filesystem::remove_all(dir);
}

TEST(Dataset, SeedsGiveDistinctScenes) {
  const auto a = make_dataset(Primitive::static_scene, 5, 12, 1, {8, 1.0});
  const auto b = make_dataset(Primitive::static_scene, 5, 12, 1, {8, 1.0});
  const auto c = make_dataset(Primitive::static_scene, 5, 12, 2, {8, 1.0});
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(a.clips[i].frames, b.clips[i].frames);
  EXPECT_NE(a.clips[0].frames, c.clips[0].frames);
  EXPECT_NE(a.clips[0].frames, a.clips[1].frames);
}

TEST(TrainLora, ZeroStepsIsNoOp) {
  const auto cfg = small_config();
  const auto model = ToyDiT<float>::init(cfg, 1);
  TrainConfig tc;
  tc.steps = 0;
  tc.rank = 2;
  tc.num_freqs = 2;
  const auto res = train_lora(model, small_clips(Primitive::offset_h), small_sampler(), tc, "h");
  EXPECT_TRUE(res.losses.empty());
  const auto fresh = init_adapter<float>(cfg, 2, derive_seed(tc.seed, "lora.adapter"), "h");
  for (const auto& id : fresh.ids()) {
    EXPECT_EQ(res.adapter.at(id).a, fresh.at(id).a);
    EXPECT_EQ(res.adapter.at(id).b, fresh.at(id).b);
  }
  ASSERT_TRUE(res.embedder.has_value());
}

TEST(TrainLora, BaseUntouchedAndDeterministic) {
  const auto cfg = small_config();
  const auto model = ToyDiT<float>::init(cfg, 1);
  const auto before = model.checksum();
  const auto clips = small_clips(Primitive::offset_h);
  TrainConfig tc;
  tc.steps = 4;
  tc.rank = 2;
  tc.num_freqs = 2;
  tc.lr = 1e-2;
  const auto r1 = train_lora(model, clips, small_sampler(), tc, "h");
  EXPECT_EQ(model.checksum(), before);
  ASSERT_EQ(r1.losses.size(), 4u);
  EXPECT_NE(r1.adapter.at("blocks.0.q").b, Tensor<float>(r1.adapter.at("blocks.0.q").b.shape()));

  ::setenv("LION_THREADS", "1", 1);
  const auto r2 = train_lora(model, clips, small_sampler(), tc, "h");
  ::setenv("LION_THREADS", "3", 1);
  const auto r3 = train_lora(model, clips, small_sampler(), tc, "h");
  ::unsetenv("LION_THREADS");
  for (const auto* r : {&r2, &r3}) {
    EXPECT_EQ(r->losses, r1.losses);
    for (const auto& id : r1.adapter.ids()) EXPECT_EQ(r->adapter.at(id).b, r1.adapter.at(id).b);
    EXPECT_EQ(r->embedder->proj, r1.embedder->proj);
  }
}

TEST(TrainLora, AdapterScaleArmHasNoEmbedder) {
  const auto cfg = small_config();
  const auto model = ToyDiT<float>::init(cfg, 1);
  TrainConfig tc;
  tc.steps = 2;
  tc.rank = 2;
  tc.arm = Arm::adapter_scale;
  const auto res = train_lora(model, small_clips(Primitive::offset_h), small_sampler(), tc, "h");
  EXPECT_FALSE(res.embedder.has_value());
  EXPECT_EQ(res.adapter.provenance.at("arm"), "adapter_scale");
  EXPECT_EQ(parse_arm("adapter_scale"), Arm::adapter_scale);
  EXPECT_THROW(parse_arm("both"), ConfigError);
}

TEST(TrainLora, RejectsMismatchedData) {
  const auto cfg = small_config();
  const auto model = ToyDiT<float>::init(cfg, 1);
  TrainConfig tc;
  tc.steps = 1;
  EXPECT_THROW(train_lora(model, {}, small_sampler(), tc, "h"), ConfigError);
  EXPECT_THROW(train_lora(model, small_clips(Primitive::offset_h), ClipSampler{12, 4}, tc, "h"), ConfigError);
  tc.lr = 0;
  EXPECT_THROW(train_lora(model, small_clips(Primitive::offset_h), small_sampler(), tc, "h"), ConfigError);
}

TEST(Pretrain, LossDecreasesOnStaticScenes) {
  const auto cfg = small_config();
  PretrainConfig pc;
  pc.steps = 60;
  pc.warmup = 5;
  pc.lr = 3e-3;
  const auto res = pretrain_base(cfg, small_clips(Primitive::static_scene, 8), small_sampler(), pc);
  ASSERT_EQ(res.losses.size(), 60u);
  const auto [first, last] = loss_endpoints(res.losses, 10);
  EXPECT_LT(last, first);
}

TEST(Divergence, DetectedAfterHundredSteps) {
  detail::DivergenceWatch w;
  w.observe(1.0, 0);
  for (int i = 1; i < 100; ++i) w.observe(20.0, i);
  EXPECT_THROW(w.observe(20.0, 100), TrainingFailure);
  detail::DivergenceWatch nan;
  EXPECT_THROW(nan.observe(std::nan(""), 0), TrainingFailure);
}

TEST(Eval, LinearityReportShape) {
  const auto cfg = small_config();
  const auto model = ToyDiT<float>::init(cfg, 1);
  TrainConfig tc;
  tc.steps = 0;
  tc.rank = 2;
  tc.num_freqs = 2;
  const auto res = train_lora(model, small_clips(Primitive::offset_h), small_sampler(), tc, "h");
  std::vector<Tensor<float>> conds{first_frame(small_clips(Primitive::static_scene, 1)[0])};
  const std::vector<double> grid{0.25, 0.4, 0.6, 0.8, 1.0};
  const auto rep = eval_linearity(model, res.adapter, &*res.embedder, Arm::scaling_token, grid, conds,
                                  small_sampler(), {2, 3});
  ASSERT_EQ(rep.rows.size(), 5u);
  for (const auto& row : rep.rows) EXPECT_EQ(row.per_condition.size(), 1u);
  EXPECT_THROW(eval_linearity(model, res.adapter, &*res.embedder, Arm::scaling_token, {0.5, 1.0}, conds,
                              small_sampler()),
               ConfigError);
  EXPECT_THROW(eval_linearity(model, res.adapter, &*res.embedder, Arm::scaling_token,
                              {0.1, 0.4, 0.6, 0.8, 1.0}, conds, small_sampler()),
               RangeError);
}

TEST(Eval, ProbesMatchModelShapes) {
  const auto cfg = small_config();
  const auto probes = make_probes(cfg, small_clips(Primitive::static_scene), small_sampler(), 5, 1);
  ASSERT_EQ(probes.size(), 5u);
  for (const auto& p : probes) {
    EXPECT_EQ(p.noisy_frames.shape(), (Shape{3, 8, 8}));
    EXPECT_EQ(p.cond_latent.size(), 64u);
    EXPECT_GE(p.timestep, 0);
    EXPECT_LT(p.timestep, 50);
  }
}
