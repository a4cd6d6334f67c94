// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0
//
// Linear-beta noise schedule, forward noising and a deterministic DDIM
// sampler. Frames live in [0, 1]; the diffusion latent is 2 * frame - 1.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <type_traits>
#include <vector>

#include "lion/common.hpp"
#include "lion/toy_dit.hpp"

namespace lion {

struct NoiseSchedule {
  std::vector<double> beta;
  std::vector<double> alpha_bar;

  static NoiseSchedule linear(int steps, double beta_start = 1e-4, double beta_end = 0.02) {
    if (steps < 1) throw ConfigError("noise schedule needs at least one step");
    NoiseSchedule s;
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
      const double b =
          steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * double(t) / double(steps - 1);
      prod *= 1.0 - b;
      s.beta.push_back(b);
      s.alpha_bar.push_back(prod);
    }
    return s;
  }

  /// The 1e-4 .. 0.02 linear range is defined for 1000 steps; with fewer steps
  /// every beta is scaled by 1000 / steps so that abar_T still reaches ~5e-5
  /// and x_T is close to pure noise.
  static NoiseSchedule compressed(int steps, int reference_steps = 1000) {
    if (steps < 1) throw ConfigError("noise schedule needs at least one step");
    const double k = double(reference_steps) / double(steps);
    return linear(steps, std::min(1e-4 * k, 0.999), std::min(0.02 * k, 0.999));
  }

  int steps() const { return int(beta.size()); }
};

template <class T>
Tensor<T> to_latent(const Tensor<T>& frames) {
  Tensor<T> out = frames;
  for (auto& v : out.data()) v = T(2) * v - T(1);
  return out;
}

template <class T>
Tensor<T> to_frames(const Tensor<T>& latent) {
  Tensor<T> out = latent;
  for (auto& v : out.data()) v = std::clamp((v + T(1)) / T(2), T(0), T(1));
  return out;
}

/// x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) noise.
template <class T>
Tensor<T> q_sample(const NoiseSchedule& s, const Tensor<T>& x0, int t, const Tensor<T>& noise) {
  const double ab = s.alpha_bar.at(std::size_t(t));
  const T a = T(std::sqrt(ab)), c = T(std::sqrt(1.0 - ab));
  Tensor<T> out = x0;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + c * noise[i];
  return out;
}

/// Descending timesteps from T - 1 to 0; a single step jumps from T - 1.
inline std::vector<int> ddim_timesteps(int total, int steps) {
  if (steps < 1) throw ConfigError("DDIM needs at least one step");
  steps = std::min(steps, total);
  std::vector<int> ts;
  if (steps == 1) return {total - 1};
  for (int i = 0; i < steps; ++i)
    ts.push_back(int((long long)(total - 1) * (steps - 1 - i) / (steps - 1)));
  return ts;
}

/// Deterministic (eta = 0) DDIM from x_T. eps(x_t, t) predicts the noise.
/// The predicted x_0 is clipped to the latent range at every step.
template <class T>
Tensor<T> ddim_loop(const NoiseSchedule& s, int steps, Tensor<T> x,
                    const std::function<Tensor<T>(const Tensor<T>&, int)>& eps) {
  const auto ts = ddim_timesteps(s.steps(), steps);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const double ab = s.alpha_bar[std::size_t(t)];
    const double ab_prev = i + 1 < ts.size() ? s.alpha_bar[std::size_t(ts[i + 1])] : 1.0;
    const Tensor<T> e = eps(x, t);
    for (std::size_t j = 0; j < x.size(); ++j) {
      double x0 = (double(x[j]) - std::sqrt(1.0 - ab) * double(e[j])) / std::sqrt(ab);
      x0 = std::clamp(x0, -1.0, 1.0);
      const double e_adj = (double(x[j]) - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
      x[j] = T(std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * e_adj);
    }
  }
  return x;
}

template <class T>
Tensor<T> initial_noise(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "ddim.noise"));
  const auto V = std::size_t(cfg.frames), F = std::size_t(cfg.frame_size);
  return normal_tensor<T>({V, F, F}, 1.0, rng);
}

/// Generates V frames in [0, 1] from a clean condition frame (pixels in [0, 1]).
template <class T>
Tensor<T> ddim_sample(const ToyDiT<T>& model, const Tensor<T>& condition_frame, int steps,
                      std::type_identity_t<const BranchSpec<T>*> spec, std::uint64_t seed) {
  const auto schedule = NoiseSchedule::compressed(model.config.diffusion_steps);
  const auto cond = to_latent(condition_frame);
  auto x = ddim_loop<T>(schedule, steps, initial_noise<T>(model.config, seed),
                        [&](const Tensor<T>& xt, int t) { return predict_noise(model, xt, cond, t, spec); });
  return to_frames(x);
}

}  // namespace lion
