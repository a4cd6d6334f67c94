// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0

#include <numbers>
#include <sstream>

#include <gtest/gtest.h>

#include "lion/diagnostics.hpp"
#include "test_util.hpp"

using namespace lion;
using namespace lion::testing;

namespace {

// Oracle: textbook two-pass formula.
double pearson_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i] / double(x.size()), my += y[i] / double(y.size());
  double a = 0, b = 0, c = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    a += (x[i] - mx) * (y[i] - my);
    b += (x[i] - mx) * (x[i] - mx);
    c += (y[i] - my) * (y[i] - my);
  }
  return a / std::sqrt(b * c);
}

// Clip of V frames with a single lit pixel per frame.
Tensor<double> dot_clip(const std::vector<std::pair<int, int>>& rc, std::size_t F = 16) {
  Tensor<double> t({rc.size(), F, F});
  for (std::size_t f = 0; f < rc.size(); ++f)
    t[(f * F + std::size_t(rc[f].first)) * F + std::size_t(rc[f].second)] = 1.0;
  return t;
}

ModelConfig small_config() {
  ModelConfig c;
  c.num_blocks = 4;
  c.channels = 16;
  c.heads = 2;
  c.frames = 2;
  c.frame_size = 8;
  c.diffusion_steps = 50;
  return c;
}

AdapterSet<double> random_adapter(std::uint64_t seed) {
  auto set = init_adapter<double>(small_config(), 2, seed, "x" + std::to_string(seed));
  std::uint64_t k = seed * 100;
  for (auto& [id, pt] : set.points) pt.b = random_tensor<double>(pt.b.shape(), ++k);
  return set;
}

std::vector<Probe<double>> probes(int n) {
  std::vector<Probe<double>> out;
  for (int i = 0; i < n; ++i)
    out.push_back({random_tensor<double>({2, 8, 8}, 100 + i), random_tensor<double>({8, 8}, 200 + i), 5 * i});
  return out;
}

}  // namespace

TEST(Pearson, KnownValues) {
  const std::vector<double> x{1, 2, 3}, y{1, 2, 4};
  EXPECT_NEAR(pearson(x, y), pearson_oracle(x, y), 1e-12);
  EXPECT_NEAR(pearson(x, y), 0.9819805060619657, 1e-12);
  EXPECT_DOUBLE_EQ(pearson(x, std::vector<double>{3, 2, 1}), -1.0);
  EXPECT_DOUBLE_EQ(pearson(x, std::vector<double>{2, 4, 6}), 1.0);
}

TEST(Pearson, MatchesOracleOnRandomData) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  std::vector<double> x(50), y(50);
  for (std::size_t i = 0; i < 50; ++i) x[i] = n(rng), y[i] = 0.3 * x[i] + n(rng);
  EXPECT_NEAR(pearson(x, y), pearson_oracle(x, y), 1e-12);
}

TEST(Pearson, AffineInvariant) {
  const std::vector<double> x{0.1, 0.4, 0.2, 0.9, 0.7}, y{1.0, 2.5, 1.1, 3.0, 2.0};
  std::vector<double> x2, y2;
  for (double v : x) x2.push_back(3.0 * v - 7.0);
  for (double v : y) y2.push_back(0.25 * v + 100.0);
  EXPECT_NEAR(pearson(x, y), pearson(x2, y2), 1e-12);
}

TEST(Pearson, Errors) {
  EXPECT_THROW(pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2}), DimensionError);
  EXPECT_THROW(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2}), DimensionError);
  EXPECT_THROW(pearson(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), UndefinedStatisticError);
}

TEST(Centroid, SinglePixelAndBlank) {
  const auto clip = dot_clip({{3, 5}});
  const auto p = centroid(clip.data(), 16);
  EXPECT_DOUBLE_EQ(p.x, 5.0);
  EXPECT_DOUBLE_EQ(p.y, 3.0);
  Tensor<double> blank({1, 16, 16});
  EXPECT_THROW(centroid_trajectory(blank), UndefinedStatisticError);
  EXPECT_THROW(centroid_trajectory(Tensor<double>({4, 4})), DimensionError);
}

TEST(MotionMagnitude, ConstructedClips) {
  EXPECT_DOUBLE_EQ(motion_magnitude(dot_clip({{4, 4}, {4, 4}, {4, 4}})), 0.0);
  EXPECT_DOUBLE_EQ(motion_magnitude(dot_clip({{4, 1}, {4, 3}, {4, 5}, {4, 7}})), 2.0);
  EXPECT_DOUBLE_EQ(motion_magnitude(dot_clip({{0, 0}, {3, 4}})), 5.0);
}

TEST(Smoothness, StraightLineIsZero) {
  EXPECT_NEAR(trajectory_smoothness(dot_clip({{2, 1}, {3, 2}, {4, 3}, {5, 4}})), 0.0, 1e-12);
}

TEST(Smoothness, RightAngleTurn) {
  // Four steps, one quarter turn among three consecutive pairs.
  const auto clip = dot_clip({{2, 2}, {2, 4}, {2, 6}, {4, 6}, {6, 6}});
  EXPECT_NEAR(trajectory_smoothness(clip), std::numbers::pi / 6.0, 1e-12);
}

TEST(Smoothness, RegularOrbitHasConstantTurn) {
  std::vector<Point2> path;
  const int steps = 12;
  for (int i = 0; i <= steps; ++i) {
    const double a = 2 * std::numbers::pi * i / steps;
    path.push_back({7.5 + 5 * std::cos(a), 7.5 + 5 * std::sin(a)});
  }
  EXPECT_NEAR(trajectory_smoothness(path), 2 * std::numbers::pi / steps, 1e-12);
}

TEST(Smoothness, StaticStepsSkipped) {
  const auto clip = dot_clip({{2, 2}, {2, 2}, {2, 4}, {2, 4}, {2, 6}});
  EXPECT_NEAR(trajectory_smoothness(clip), 0.0, 1e-12);
  EXPECT_THROW(trajectory_smoothness(dot_clip({{2, 2}, {2, 2}, {2, 2}})), UndefinedStatisticError);
}

TEST(Direction, AxesAndDiagonal) {
  EXPECT_NEAR(mean_direction_deg(centroid_trajectory(dot_clip({{4, 1}, {4, 6}}))), 0.0, 1e-12);
  EXPECT_NEAR(mean_direction_deg(centroid_trajectory(dot_clip({{1, 4}, {6, 4}}))), 90.0, 1e-12);
  EXPECT_NEAR(mean_direction_deg(centroid_trajectory(dot_clip({{1, 1}, {6, 6}}))), 45.0, 1e-12);
  EXPECT_THROW(mean_direction_deg(centroid_trajectory(dot_clip({{1, 1}, {1, 1}}))), UndefinedStatisticError);
}

TEST(LayerwiseCosine, SelfAndNegated) {
  const auto cfg = small_config();
  const auto model = ToyDiT<double>::init(cfg, 1);
  const auto a = random_adapter(1);
  auto neg = a;
  for (auto& [id, pt] : neg.points)
    for (auto& v : pt.b.data()) v = -v;
  const auto ps = probes(3);
  const auto self = layerwise_cosine(model, a, a, ps);
  const auto opp = layerwise_cosine(model, a, neg, ps);
  ASSERT_EQ(self.blocks.size(), 4u);
  for (int b = 0; b < 4; ++b) {
    EXPECT_NEAR(self.blocks[std::size_t(b)].mean, 1.0, 1e-12);
    EXPECT_NEAR(opp.blocks[std::size_t(b)].mean, -1.0, 1e-12);
    EXPECT_EQ(self.blocks[std::size_t(b)].count, 3);
  }
  const auto [lo, hi] = half_means(opp);
  EXPECT_NEAR(lo, 1.0, 1e-12);
  EXPECT_NEAR(hi, 1.0, 1e-12);
}

TEST(LayerwiseCosine, ZeroAdapterExcluded) {
  const auto cfg = small_config();
  const auto model = ToyDiT<double>::init(cfg, 1);
  const auto zero = init_adapter<double>(cfg, 2, 5, "zero");
  const auto prof = layerwise_cosine(model, random_adapter(1), zero, probes(2));
  EXPECT_EQ(prof.excluded, 8);
  for (const auto& b : prof.blocks) EXPECT_TRUE(std::isnan(b.mean));
}

TEST(NormProfile, ZeroAndDoubling) {
  const auto cfg = small_config();
  const auto model = ToyDiT<double>::init(cfg, 1);
  const auto a = random_adapter(2);
  auto twice = a;
  twice.name = "twice";
  for (auto& [id, pt] : twice.points)
    for (auto& v : pt.b.data()) v *= 2;
  const auto zero = init_adapter<double>(cfg, 2, 5, "zero");
  const auto prof = norm_profile(model, {&a, &twice, &zero}, probes(2));
  ASSERT_EQ(prof.norms.size(), 3u);
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t p = 0; p < 2; ++p) {
      EXPECT_GT(prof.norms[0][b][p], 0.0);
      EXPECT_NEAR(prof.norms[1][b][p], 2 * prof.norms[0][b][p], 1e-12 * prof.norms[0][b][p]);
      EXPECT_EQ(prof.norms[2][b][p], 0.0);
    }
}

TEST(ProfileCsv, HeaderAndRows) {
  const auto cfg = small_config();
  const auto model = ToyDiT<double>::init(cfg, 1);
  const auto a = random_adapter(1), b = random_adapter(2);
  std::ostringstream os;
  layerwise_cosine(model, a, b, probes(2)).write_csv(os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "block_index,metric,mean,std,sample_id");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 4 * (2 + 1));
}
