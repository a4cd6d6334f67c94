// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0

#include <sstream>

#include <gtest/gtest.h>

#include "lion/fusion.hpp"
#include "test_util.hpp"

using namespace lion;
using namespace lion::testing;

namespace {

ModelConfig fusion_config() {
  ModelConfig c;
  c.num_blocks = 2;
  c.channels = 16;
  c.heads = 2;
  c.frames = 2;
  c.frame_size = 8;
  return c;
}

AdapterSet<double> random_adapter(std::uint64_t seed, std::string name, double b_scale = 1.0) {
  auto set = init_adapter<double>(fusion_config(), 3, seed, std::move(name));
  std::uint64_t k = seed * 1000;
  for (auto& [id, pt] : set.points) {
    pt.a = random_tensor<double>(pt.a.shape(), ++k);
    pt.b = random_tensor<double>(pt.b.shape(), ++k, -b_scale, b_scale);
  }
  return set;
}

// Oracle: entry-wise sum of lambda_i * s_i * A_i B_i with explicit loops.
Tensor<double> oracle(const std::vector<const AdapterSet<double>*>& sets,
                      const std::vector<double>& coefs, const std::string& id) {
  Tensor<double> acc;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const auto d = triple_loop_matmul(sets[i]->at(id).a, sets[i]->at(id).b);
    if (acc.empty()) acc = Tensor<double>(d.shape());
    for (std::size_t j = 0; j < d.size(); ++j) acc[j] += coefs[i] * d[j];
  }
  return acc;
}

}  // namespace

TEST(VanillaFuse, SingleAdapterIsItsDelta) {
  const auto a = random_adapter(1, "a");
  FusionPlan<double> plan{{&a}, {}, FusionMode::vanilla, {}};
  const auto fused = vanilla_fuse(plan);
  for (const auto& id : a.ids()) EXPECT_EQ(fused.at(id), delta_weight(a.at(id)));
}

TEST(VanillaFuse, OppositeLambdasCancel) {
  const auto a = random_adapter(1, "a");
  FusionPlan<double> plan{{&a, &a}, {1.0, -1.0}, FusionMode::vanilla, {}};
  for (const auto& [id, d] : vanilla_fuse(plan))
    for (double v : d.data()) EXPECT_EQ(v, 0.0);
}

TEST(VanillaFuse, MatchesEntrywiseOracle) {
  const auto a = random_adapter(1, "a"), b = random_adapter(2, "b");
  FusionPlan<double> plan{{&a, &b}, {0.7, 1.3}, FusionMode::vanilla, {}};
  for (const auto& [id, d] : vanilla_fuse(plan))
    EXPECT_LT(max_abs_diff(d, oracle({&a, &b}, {0.7, 1.3}, id)), 1e-12) << id;
}

TEST(VanillaFuse, LinearInEachLambda) {
  const auto a = random_adapter(1, "a"), b = random_adapter(2, "b");
  auto at = [&](double l1) {
    return vanilla_fuse(FusionPlan<double>{{&a, &b}, {l1, 0.5}, FusionMode::vanilla, {}});
  };
  const auto f0 = at(0.0), f1 = at(1.0), f3 = at(3.0);
  for (const auto& [id, d] : f3) {
    Tensor<double> expect = f0.at(id);
    for (std::size_t j = 0; j < expect.size(); ++j) expect[j] += 3 * (f1.at(id)[j] - f0.at(id)[j]);
    EXPECT_LT(max_abs_diff(d, expect), 1e-12);
  }
}

TEST(FusionPlan, MismatchedIdsAreListed) {
  const auto a = random_adapter(1, "a");
  auto b = random_adapter(2, "b");
  b.points.erase("blocks.1.k");
  FusionPlan<double> plan{{&a, &b}, {}, FusionMode::vanilla, {}};
  try {
    vanilla_fuse(plan);
    FAIL();
  } catch (const FusionError& e) {
    EXPECT_NE(std::string(e.what()).find("blocks.1.k"), std::string::npos);
  }
  FusionPlan<double> counts{{&a}, {1.0, 2.0}, FusionMode::vanilla, {}};
  EXPECT_THROW(vanilla_fuse(counts), FusionError);
  EXPECT_THROW(vanilla_fuse(FusionPlan<double>{}), FusionError);
}

TEST(ComputeAlpha, Means) {
  EXPECT_EQ(compute_alpha<double>(std::vector<double>{2, 4}), 3.0);
  EXPECT_EQ(compute_alpha<double>(std::vector<double>{5}), 5.0);
  EXPECT_EQ(compute_alpha<double>(std::vector<double>{1, 2, 3}), 2.0);
  EXPECT_EQ(compute_alpha<double>(std::vector<double>{1, 2, 3}, 7.0), 7.0);
  EXPECT_THROW(compute_alpha<double>(std::vector<double>{1, 0}), DegenerateAdapterError);
}

TEST(NormConsistentFuse, ScaleFactorsForNormsTwoAndFour) {
  AdapterSet<double> a, b;
  a.name = "a";
  b.name = "b";
  // rank-1 deltas with Frobenius norms 2 and 4
  a.points["p"] = {Tensor<double>({2, 1}, {1, 0}), Tensor<double>({1, 2}, {2, 0})};
  b.points["p"] = {Tensor<double>({2, 1}, {0, 1}), Tensor<double>({1, 2}, {0, 4})};
  FusionPlan<double> plan{{&a, &b}, {}, FusionMode::norm_consistent, {}};
  const auto [fused, report] = norm_consistent_fuse(plan);
  ASSERT_EQ(report.entries.size(), 2u);
  EXPECT_DOUBLE_EQ(report.entries[0].scale_factor, 1.5);
  EXPECT_DOUBLE_EQ(report.entries[1].scale_factor, 0.75);
  EXPECT_DOUBLE_EQ(report.entries[0].alpha, 3.0);
  EXPECT_EQ(fused.at("p"), Tensor<double>({2, 2}, {3, 0, 0, 3}));
}

TEST(NormConsistentFuse, SingleAdapterIsUnchanged) {
  const auto a = random_adapter(4, "a");
  const auto [fused, report] =
      norm_consistent_fuse(FusionPlan<double>{{&a}, {}, FusionMode::norm_consistent, {}});
  for (const auto& id : a.ids()) EXPECT_LT(max_abs_diff(fused.at(id), delta_weight(a.at(id))), 1e-15);
  for (const auto& e : report.entries) EXPECT_EQ(e.scale_factor, 1.0);
}

TEST(NormConsistentFuse, NormsEqualAlpha) {
  const auto a = random_adapter(1, "a", 0.1), b = random_adapter(2, "b", 1.0),
             c = random_adapter(3, "c", 5.0);
  const auto [fused, report] =
      norm_consistent_fuse(FusionPlan<double>{{&a, &b, &c}, {}, FusionMode::norm_consistent, {}});
  EXPECT_EQ(report.entries.size(), 3 * a.points.size());
  for (const auto& e : report.entries) EXPECT_NEAR(e.norm_after, e.alpha, 1e-9);
  // independent recomputation of alpha and of each rescaled delta norm
  for (const auto& id : a.ids()) {
    double norms[3], alpha = 0;
    const AdapterSet<double>* sets[3] = {&a, &b, &c};
    for (int i = 0; i < 3; ++i) {
      const auto d = triple_loop_matmul(sets[i]->at(id).a, sets[i]->at(id).b);
      double sq = 0;
      for (double v : d.data()) sq += v * v;
      norms[i] = std::sqrt(sq);
      alpha += norms[i] / 3;
    }
    for (int i = 0; i < 3; ++i) {
      const auto d = triple_loop_matmul(sets[i]->at(id).a, sets[i]->at(id).b);
      double sq = 0;
      for (double v : d.data()) sq += (alpha / norms[i] * v) * (alpha / norms[i] * v);
      EXPECT_NEAR(std::sqrt(sq), alpha, 1e-9);
    }
    EXPECT_LT(max_abs_diff(fused.at(id), oracle({&a, &b, &c},
                                                {alpha / norms[0], alpha / norms[1], alpha / norms[2]}, id)),
              1e-9);
  }
}

TEST(NormConsistentFuse, ScaleInvariantWithFixedAlpha) {
  const auto a = random_adapter(1, "a"), b = random_adapter(2, "b");
  auto b_scaled = b;
  for (auto& [id, pt] : b_scaled.points)
    for (auto& v : pt.b.data()) v *= 3.7;
  const auto ref = norm_consistent_fuse(FusionPlan<double>{{&a, &b}, {}, FusionMode::norm_consistent, 2.0});
  const auto scaled =
      norm_consistent_fuse(FusionPlan<double>{{&a, &b_scaled}, {}, FusionMode::norm_consistent, 2.0});
  for (const auto& id : a.ids()) EXPECT_LT(max_abs_diff(ref.first.at(id), scaled.first.at(id)), 1e-9);
}

TEST(NormConsistentFuse, ZeroAdapterIsDegenerate) {
  const auto a = random_adapter(1, "a");
  const auto z = init_adapter<double>(fusion_config(), 3, 5, "zero");
  try {
    norm_consistent_fuse(FusionPlan<double>{{&a, &z}, {}, FusionMode::norm_consistent, {}});
    FAIL();
  } catch (const DegenerateAdapterError& e) {
    EXPECT_NE(std::string(e.what()).find("zero"), std::string::npos);
  }
}

TEST(NormReport, CsvColumns) {
  const auto a = random_adapter(1, "a"), b = random_adapter(2, "b");
  const auto [fused, report] = fuse(FusionPlan<double>{{&a, &b}, {}, FusionMode::norm_consistent, {}});
  std::ostringstream os;
  report.write_csv(os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "attachment_id,adapter_name,norm_before,alpha,scale_factor,norm_after");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, int(2 * a.points.size()));
}

TEST(FusionMode, Parse) {
  EXPECT_EQ(parse_fusion_mode("vanilla"), FusionMode::vanilla);
  EXPECT_EQ(parse_fusion_mode("norm_consistent"), FusionMode::norm_consistent);
  EXPECT_THROW(parse_fusion_mode("mean"), ConfigError);
}
