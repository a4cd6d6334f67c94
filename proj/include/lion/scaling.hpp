// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0
//
// Scaling tokens: a scalar amplitude S in [s, 1] is lifted with Fourier
// features, projected by a per-adapter linear layer and appended to the token
// sequence. ClipSampler turns S into the frame indices that define a training
// pair, which is where the linear meaning of S comes from.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "lion/autograd.hpp"
#include "lion/common.hpp"
#include "lion/weight_file.hpp"

namespace lion {

namespace detail {

// sin(pi x) and cos(pi x) with exact reduction modulo 2, so quarter-period
// arguments give exact 0 and +-1.
inline double sin_pi(double x) {
  double r = std::fmod(x, 2.0);
  if (r < 0) r += 2.0;
  const double pi = std::numbers::pi;
  if (r <= 0.25) return std::sin(pi * r) + 0.0;
  if (r < 0.75) return std::cos(pi * (r - 0.5));
  if (r <= 1.25) return -std::sin(pi * (r - 1.0)) + 0.0;
  if (r < 1.75) return -std::cos(pi * (r - 1.5));
  return std::sin(pi * (r - 2.0)) + 0.0;
}

inline double cos_pi(double x) {
  double r = std::fmod(x, 2.0);
  if (r < 0) r += 2.0;
  const double pi = std::numbers::pi;
  if (r <= 0.25) return std::cos(pi * r);
  if (r < 0.75) return -std::sin(pi * (r - 0.5)) + 0.0;
  if (r <= 1.25) return -std::cos(pi * (r - 1.0));
  if (r < 1.75) return std::sin(pi * (r - 1.5)) + 0.0;
  return std::cos(pi * (r - 2.0));
}

}  // namespace detail

/// [sin(2^j pi S), cos(2^j pi S)] for j = 0 .. J-1, concatenated.
inline std::vector<double> fourier_embed(double s, int num_freqs) {
  if (num_freqs < 1) throw ConfigError("fourier_embed needs at least one frequency");
  std::vector<double> out;
  out.reserve(std::size_t(2 * num_freqs));
  for (int j = 0; j < num_freqs; ++j) {
    const double x = std::ldexp(s, j);
    out.push_back(detail::sin_pi(x));
    out.push_back(detail::cos_pi(x));
  }
  return out;
}

template <class T>
Tensor<T> fourier_row(double s, int num_freqs) {
  const auto f = fourier_embed(s, num_freqs);
  return Tensor<T>({1, f.size()}, std::vector<T>(f.begin(), f.end()));
}

/// Frame subsampling: V frames spread uniformly over the first ceil(N * S)
/// frames of an N-frame clip. s = V / N is the smallest admissible S.
struct ClipSampler {
  int clip_length = 120;
  int frames = 13;

  static ClipSampler camera() { return {600, 49}; }
  static ClipSampler object_motion() { return {240, 49}; }

  double min_scale() const { return double(frames) / double(clip_length); }

  void validate() const {
    if (frames < 2) throw ConfigError("sampler needs at least two frames");
    if (clip_length < frames) throw ConfigError("clip_length must be at least the frame count");
  }

  void check_scale(double s) const {
    constexpr double slack = 1e-12;
    if (!(s >= min_scale() - slack && s <= 1.0 + slack))
      throw RangeError("scaling value " + std::to_string(s) + " outside [" +
                       std::to_string(min_scale()) + ", 1]");
  }

  /// ceil(N * S), guarded against S = V / N landing a hair above an integer.
  int source_frames(double s) const {
    const double raw = double(clip_length) * s;
    const double nearest = std::round(raw);
    const int m = std::abs(raw - nearest) < 1e-9 ? int(nearest) : int(std::ceil(raw));
    return std::min(m, clip_length);
  }
};

inline std::vector<int> sample_frame_indices(const ClipSampler& sampler, double s) {
  sampler.validate();
  sampler.check_scale(s);
  const int m = sampler.source_frames(s);
  if (m < sampler.frames)
    throw RangeError("only " + std::to_string(m) + " source frames for " +
                     std::to_string(sampler.frames) + " samples");
  std::vector<int> idx;
  const long long span = m - 1, denom = sampler.frames - 1;
  for (long long t = 0; t < sampler.frames; ++t) idx.push_back(int(t * span / denom));
  return idx;
}

template <class T>
struct ScalingToken {
  Tensor<T> embedding;  // 1 x d
  double value = 0;
  std::string adapter_name;
};

/// Per-adapter projection from the 2J Fourier features to the model width.
template <class T>
struct ScalingEmbedder {
  std::string adapter_name;
  int num_freqs = 8;
  ClipSampler sampler;  // defines the admissible range [s, 1]
  Tensor<T> proj;       // 2J x d
  Tensor<T> bias;       // d

  static ScalingEmbedder init(std::string adapter_name, int num_freqs, int channels,
                              const ClipSampler& sampler, std::uint64_t seed) {
    if (num_freqs < 1 || channels < 1) throw ConfigError("embedder needs J >= 1 and d >= 1");
    sampler.validate();
    Rng rng(derive_seed(seed, "scaling.init"));
    ScalingEmbedder e;
    e.adapter_name = std::move(adapter_name);
    e.num_freqs = num_freqs;
    e.sampler = sampler;
    // unit-variance E per channel, since the features have squared norm J
    e.proj = normal_tensor<T>({std::size_t(2 * num_freqs), std::size_t(channels)}, 1.0 / std::sqrt(double(num_freqs)), rng);
    e.bias = Tensor<T>({std::size_t(channels)});
    return e;
  }

  std::size_t channels() const { return bias.size(); }

  Section to_section() const {
    Section s{"scaling/" + adapter_name,
              {{"adapter", adapter_name},
               {"num_freqs", num_freqs},
               {"clip_length", sampler.clip_length},
               {"frames", sampler.frames}},
              {}};
    s.add("proj", proj);
    s.add("bias", bias);
    return s;
  }

  static ScalingEmbedder from_section(const Section& s) {
    ScalingEmbedder e;
    try {
      e.adapter_name = s.meta.at("adapter").get<std::string>();
      e.num_freqs = s.meta.at("num_freqs").get<int>();
      e.sampler.clip_length = s.meta.at("clip_length").get<int>();
      e.sampler.frames = s.meta.at("frames").get<int>();
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError(ParseErrorKind::malformed_header, std::string("scaling meta: ") + ex.what());
    }
    e.proj = s.get<T>("proj");
    e.bias = s.get<T>("bias");
    if (e.proj.shape() != Shape{std::size_t(2 * e.num_freqs), e.bias.size()})
      throw ParseError(ParseErrorKind::malformed_header, "scaling projection shape");
    return e;
  }
};

/// E = gamma(S) P + b, with S checked against the embedder's [s, 1].
template <class T>
ScalingToken<T> make_scaling_token(const ScalingEmbedder<T>& embedder, double s) {
  embedder.sampler.check_scale(s);
  Tensor<T> e = matmul(fourier_row<T>(s, embedder.num_freqs), embedder.proj);
  for (std::size_t j = 0; j < e.size(); ++j) e[j] += embedder.bias[j];
  return {std::move(e), s, embedder.adapter_name};
}

/// Differentiable variant used while training the projection.
template <class T>
Var<T> scaling_token_var(Var<T> proj, Var<T> bias, double s, int num_freqs) {
  auto& tape = *proj.tape;
  return ad::add_bias(ad::matmul(tape.constant(fourier_row<T>(s, num_freqs)), proj), bias);
}

/// [H; E]: rows 0..n-1 are H untouched, row n is the token.
template <class T>
Tensor<T> augment_sequence(const Tensor<T>& h, const ScalingToken<T>& token) {
  if (h.rank() != 2 || token.embedding.size() != h.shape()[1])
    throw DimensionError("augment_sequence: token width " + std::to_string(token.embedding.size()) +
                         " vs sequence " + shape_str(h.shape()));
  std::vector<T> buf(h.data().begin(), h.data().end());
  buf.insert(buf.end(), token.embedding.data().begin(), token.embedding.data().end());
  return Tensor<T>({h.shape()[0] + 1, h.shape()[1]}, std::move(buf));
}

}  // namespace lion
