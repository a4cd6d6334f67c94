// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0
//
// Training-free fusion of k scaling-token adapters. Each block runs once per
// adapter over its own subspace [H; E_i] with that adapter's weights; the n
// shared rows of the k branches are averaged and each branch keeps its own
// token row, so the next block again sees H (n x d) plus k token rows.
//
// With full_block (the default) both the attention and the MLP sublayer run
// per branch before averaging. With attention_only the branches are averaged
// after attention and the MLP runs once over [H; E_1; ...; E_k] with the
// fused low-rank terms of all adapters.

#pragma once

#include <string>
#include <vector>

#include "lion/diffusion.hpp"
#include "lion/fusion.hpp"
#include "lion/scaling.hpp"
#include "lion/toy_dit.hpp"

namespace lion {

enum class AveragingScope { full_block, attention_only };

template <class T>
struct FusedContext {
  FusionPlan<T> plan;                   // adapters, lambdas, vanilla or norm_consistent
  std::vector<Tensor<T>> tokens;        // E_1 .. E_k, each 1 x d
  AveragingScope scope = AveragingScope::full_block;

  std::size_t k() const { return plan.size(); }

  void validate(const ModelConfig& cfg) const {
    if (plan.adapters.empty()) throw FusionError("fusion context has no adapters");
    plan.validate();
    if (tokens.size() != plan.size())
      throw FusionError(std::to_string(tokens.size()) + " scaling tokens for " +
                        std::to_string(plan.size()) + " adapters");
    for (const auto& e : tokens)
      if (e.shape() != Shape{1, std::size_t(cfg.channels)})
        throw DimensionError("scaling token " + shape_str(e.shape()) + " does not match channels " +
                             std::to_string(cfg.channels));
    for (const auto* a : plan.adapters) validate_adapter(*a, cfg);
  }
};

/// [H; E_1; ...; E_k]: rows 0..n-1 are H, row n+i-1 is E_i.
template <class T>
Tensor<T> build_augmented_sequence(const Tensor<T>& h, const std::vector<Tensor<T>>& tokens) {
  if (tokens.empty()) throw FusionError("build_augmented_sequence needs at least one token");
  if (h.rank() != 2) throw DimensionError("build_augmented_sequence: H must be 2-D");
  std::vector<T> buf(h.data().begin(), h.data().end());
  for (const auto& e : tokens) {
    if (e.size() != h.shape()[1])
      throw DimensionError("token width " + std::to_string(e.size()) + " vs H " +
                           shape_str(h.shape()));
    buf.insert(buf.end(), e.data().begin(), e.data().end());
  }
  return Tensor<T>({h.shape()[0] + tokens.size(), h.shape()[1]}, std::move(buf));
}

/// Per-branch low-rank descriptions. Norm-consistent mode rescales every
/// delta to the per-point alpha; vanilla mode keeps the raw deltas.
template <class T>
std::vector<BranchSpec<T>> branch_specs(const FusedContext<T>& ctx, const ModelConfig& cfg) {
  std::vector<BranchSpec<T>> out;
  std::vector<std::map<std::string, T>> scales;
  if (ctx.plan.mode == FusionMode::norm_consistent) scales = norm_scale_factors(ctx.plan).first;
  for (std::size_t i = 0; i < ctx.k(); ++i) {
    const T lambda = ctx.plan.lambda(i);
    if (scales.empty())
      out.push_back(branch_spec(*ctx.plan.adapters[i], cfg, lambda));
    else
      out.push_back(branch_spec(*ctx.plan.adapters[i], cfg, lambda,
                                [&](const std::string& id) { return scales[i].at(id); }));
    out.back().token = ctx.tokens[i];
  }
  return out;
}

/// Every branch's terms at every point, used by the attention_only MLP pass.
template <class T>
Injection<T> merged_injection(const std::vector<Injection<T>>& branches) {
  Injection<T> out;
  for (const auto& b : branches) {
    if (out.blocks.size() < b.blocks.size()) out.blocks.resize(b.blocks.size());
    for (std::size_t blk = 0; blk < b.blocks.size(); ++blk)
      for (int r = 0; r < kNumRoles; ++r)
        for (const auto& term : b.blocks[blk][std::size_t(r)])
          out.blocks[blk][std::size_t(r)].push_back(term);
  }
  return out;
}

template <class T>
struct PartitionedOutput {
  Var<T> shared;               // n x d
  std::vector<Var<T>> tokens;  // k rows
  std::vector<Var<T>> branch;  // per-branch (n+1) x d before averaging
};

/// One block over k subspaces [H; E_i]; shared rows averaged in declaration order.
template <class T>
PartitionedOutput<T> partitioned_attention_block(const BoundModel<T>& m, std::size_t block,
                                                 Var<T> shared, const std::vector<Var<T>>& tokens,
                                                 const std::vector<Injection<T>>& branches,
                                                 AveragingScope scope = AveragingScope::full_block) {
  const std::size_t k = branches.size();
  if (k == 0) throw FusionError("partitioned attention over zero adapters");
  if (tokens.size() != k)
    throw FusionError(std::to_string(tokens.size()) + " tokens for " + std::to_string(k) + " branches");
  const std::size_t n = shared.shape()[0], d = shared.shape()[1];
  for (const auto& e : tokens)
    if (e.shape() != Shape{1, d})
      throw DimensionError("token " + shape_str(e.shape()) + " vs shared stream " +
                           shape_str(shared.shape()));

  PartitionedOutput<T> out;
  std::vector<Var<T>> shared_parts;
  for (std::size_t i = 0; i < k; ++i) {
    auto hi = ad::concat_rows<T>({shared, tokens[i]});
    auto yi = attention_stage(m, block, hi, &branches[i]);
    if (scope == AveragingScope::full_block) yi = mlp_stage(m, block, yi, &branches[i]);
    out.branch.push_back(yi);
    shared_parts.push_back(ad::slice_rows(yi, 0, n));
    out.tokens.push_back(ad::slice_rows(yi, n, n + 1));
  }
  Var<T> sum = shared_parts.front();
  for (std::size_t i = 1; i < k; ++i) sum = ad::add(sum, shared_parts[i]);
  out.shared = k == 1 ? sum : ad::scale(sum, T(1) / T(k));

  if (scope == AveragingScope::attention_only) {
    std::vector<Var<T>> rows{out.shared};
    rows.insert(rows.end(), out.tokens.begin(), out.tokens.end());
    const auto merged = merged_injection(branches);
    auto y = mlp_stage(m, block, ad::concat_rows(rows), &merged);
    out.shared = ad::slice_rows(y, 0, n);
    for (std::size_t i = 0; i < k; ++i) out.tokens[i] = ad::slice_rows(y, n + i, n + i + 1);
  }
  return out;
}

/// Noise prediction with k adapters fused through partitioned attention.
template <class T>
Var<T> fused_forward(const BoundModel<T>& m, const Tensor<T>& noisy_tokens,
                     const Tensor<T>& cond_frame, int timestep,
                     const std::vector<Injection<T>>& branches, const std::vector<Var<T>>& tokens,
                     AveragingScope scope = AveragingScope::full_block,
                     std::vector<Var<T>>* final_tokens = nullptr) {
  auto temb = time_embedding(m, timestep);
  auto h = ad::add_bias(embed_tokens(m, noisy_tokens, cond_frame), temb);
  std::vector<Var<T>> toks;
  for (const auto& e : tokens) toks.push_back(ad::add_bias(e, temb));
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    auto out = partitioned_attention_block(m, b, h, toks, branches, scope);
    h = out.shared;
    toks = std::move(out.tokens);
  }
  if (final_tokens) *final_tokens = toks;
  return output_head(m, h);
}

template <class T>
Tensor<T> fused_predict_noise(const ToyDiT<T>& model, const Tensor<T>& noisy_frames,
                              const Tensor<T>& cond_latent, int timestep,
                              const std::vector<BranchSpec<T>>& specs,
                              AveragingScope scope = AveragingScope::full_block) {
  Tape<T> tape;
  auto bm = bind_model(tape, model);
  std::vector<Injection<T>> branches;
  std::vector<Var<T>> tokens;
  for (const auto& s : specs) {
    branches.push_back(bind_injection(tape, s));
    if (!s.token) throw FusionError("fused branch without a scaling token");
    tokens.push_back(tape.constant(*s.token));
  }
  auto eps = fused_forward(bm, patchify(noisy_frames, model.config), cond_latent, timestep,
                           branches, tokens, scope);
  return unpatchify(eps.value(), model.config);
}

/// V frames in [0, 1] generated under the fused context.
template <class T>
Tensor<T> fused_ddim_sample(const ToyDiT<T>& model, const Tensor<T>& condition_frame, int steps,
                            const FusedContext<T>& ctx, std::uint64_t seed) {
  ctx.validate(model.config);
  const auto specs = branch_specs(ctx, model.config);
  const auto schedule = NoiseSchedule::compressed(model.config.diffusion_steps);
  const auto cond = to_latent(condition_frame);
  auto x = ddim_loop<T>(schedule, steps, initial_noise<T>(model.config, seed),
                        [&](const Tensor<T>& xt, int t) {
                          return fused_predict_noise(model, xt, cond, t, specs, ctx.scope);
                        });
  return to_frames(x);
}

}  // namespace lion
