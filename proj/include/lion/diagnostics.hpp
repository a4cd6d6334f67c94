// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0
//
// Measurements on adapters and generated clips: per-block similarity and norm
// of adapter contributions, Pearson correlation, and centroid-based motion
// statistics used in place of optical flow.

#pragma once

#include <cmath>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lion/adapter.hpp"
#include "lion/toy_dit.hpp"

namespace lion {

/// A statistic that does not exist for the given data (zero variance, blank frame, ...).
class UndefinedStatisticError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Sample correlation of two equally long sequences.
inline double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size())
    throw DimensionError("pearson: " + std::to_string(x.size()) + " vs " + std::to_string(y.size()) +
                         " values");
  if (x.size() < 3) throw DimensionError("pearson needs at least three pairs");
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= x.size();
  my /= y.size();
  long double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const long double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0 || syy == 0) throw UndefinedStatisticError("pearson: zero variance");
  return std::clamp(double(sxy / std::sqrt(sxx * syy)), -1.0, 1.0);
}

struct Point2 {
  double x = 0, y = 0;
};

/// Intensity-weighted mean pixel position (x = column, y = row) of an F x F frame.
template <class T>
Point2 centroid(std::span<const T> frame, std::size_t size) {
  long double w = 0, sx = 0, sy = 0;
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c) {
      const long double v = frame[r * size + c];
      w += v;
      sx += v * c;
      sy += v * r;
    }
  if (!(w > 0)) throw UndefinedStatisticError("centroid of a blank frame");
  return {double(sx / w), double(sy / w)};
}

/// Centroid of every frame of a [V x F x F] clip.
template <class T>
std::vector<Point2> centroid_trajectory(const Tensor<T>& frames) {
  if (frames.rank() != 3 || frames.shape()[1] != frames.shape()[2])
    throw DimensionError("expected [V x F x F] frames, got " + shape_str(frames.shape()));
  const auto V = frames.shape()[0], F = frames.shape()[1];
  std::vector<Point2> out;
  for (std::size_t f = 0; f < V; ++f) out.push_back(centroid(frames.data().subspan(f * F * F, F * F), F));
  return out;
}

/// Mean centroid displacement between consecutive frames, in pixels.
inline double motion_magnitude(const std::vector<Point2>& path) {
  if (path.size() < 2) throw DimensionError("motion_magnitude needs at least two frames");
  double total = 0;
  for (std::size_t i = 1; i < path.size(); ++i)
    total += std::hypot(path[i].x - path[i - 1].x, path[i].y - path[i - 1].y);
  return total / double(path.size() - 1);
}

template <class T>
double motion_magnitude(const Tensor<T>& frames) {
  return motion_magnitude(centroid_trajectory(frames));
}

/// Mean turning angle (radians) between consecutive displacement vectors.
/// Zero-length steps are skipped; lower is smoother.
inline double trajectory_smoothness(const std::vector<Point2>& path) {
  if (path.size() < 3) throw DimensionError("trajectory_smoothness needs at least three frames");
  std::vector<Point2> steps;
  for (std::size_t i = 1; i < path.size(); ++i) {
    const Point2 d{path[i].x - path[i - 1].x, path[i].y - path[i - 1].y};
    if (std::hypot(d.x, d.y) > 1e-12) steps.push_back(d);
  }
  if (steps.size() < 2) throw UndefinedStatisticError("trajectory_smoothness: fewer than two moving steps");
  double total = 0;
  for (std::size_t i = 1; i < steps.size(); ++i) {
    const auto& a = steps[i - 1];
    const auto& b = steps[i];
    total += std::atan2(std::abs(a.x * b.y - a.y * b.x), a.x * b.x + a.y * b.y);
  }
  return total / double(steps.size() - 1);
}

template <class T>
double trajectory_smoothness(const Tensor<T>& frames) {
  return trajectory_smoothness(centroid_trajectory(frames));
}

/// Angle in degrees of the mean displacement (x right, y down the rows).
inline double mean_direction_deg(const std::vector<Point2>& path) {
  if (path.size() < 2) throw DimensionError("mean_direction needs at least two frames");
  const double dx = path.back().x - path.front().x, dy = path.back().y - path.front().y;
  if (std::hypot(dx, dy) < 1e-12) throw UndefinedStatisticError("mean_direction of a static path");
  return std::atan2(dy, dx) * 180.0 / std::numbers::pi;
}

// ---------------------------------------------------------------------------
// Activation-level adapter analysis

/// One probe input for the base model.
template <class T>
struct Probe {
  Tensor<T> noisy_frames;  // [V x F x F] latent
  Tensor<T> cond_latent;   // F x F
  int timestep = 0;
};

struct BlockStat {
  int block = 0;
  double mean = 0;
  double std = 0;
  int count = 0;
};

struct SimilarityProfile {
  std::vector<BlockStat> blocks;
  std::vector<std::vector<double>> per_sample;  // [block][probe], NaN when excluded
  int excluded = 0;

  void write_csv(std::ostream& os) const {
    os << "block_index,metric,mean,std,sample_id\n" << std::setprecision(12);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      for (std::size_t s = 0; s < per_sample[b].size(); ++s)
        if (!std::isnan(per_sample[b][s]))
          os << b << ",cosine," << per_sample[b][s] << ",0," << s << '\n';
      os << b << ",cosine," << blocks[b].mean << ',' << blocks[b].std << ",all\n";
    }
  }
};

struct NormProfile {
  std::vector<std::string> adapters;
  std::vector<std::vector<std::vector<double>>> norms;  // [adapter][block][probe]

  void write_csv(std::ostream& os) const {
    os << "block_index,metric,mean,std,sample_id\n" << std::setprecision(12);
    for (std::size_t a = 0; a < adapters.size(); ++a)
      for (std::size_t b = 0; b < norms[a].size(); ++b) {
        const auto& v = norms[a][b];
        double mean = 0, sq = 0;
        for (double x : v) mean += x / double(v.size());
        for (double x : v) sq += (x - mean) * (x - mean);
        for (std::size_t s = 0; s < v.size(); ++s)
          os << b << ",norm:" << adapters[a] << ',' << v[s] << ",0," << s << '\n';
        os << b << ",norm:" << adapters[a] << ',' << mean << ','
           << (v.size() > 1 ? std::sqrt(sq / double(v.size() - 1)) : 0.0) << ",all\n";
      }
  }
};

namespace detail {

/// Base-model inputs of every attachment point, one capture per probe.
template <class T>
std::vector<ForwardCapture<T>> capture_probes(const ToyDiT<T>& model,
                                              const std::vector<Probe<T>>& probes) {
  if (probes.empty()) throw ConfigError("probe batch is empty");
  std::vector<ForwardCapture<T>> caps(probes.size());
  for (std::size_t i = 0; i < probes.size(); ++i) {
    Tape<T> tape;
    auto bm = bind_model(tape, model);
    forward(bm, patchify(probes[i].noisy_frames, model.config), probes[i].cond_latent,
            probes[i].timestep, nullptr, {}, &caps[i]);
  }
  return caps;
}

/// Concatenated low-rank outputs (x A) B of one adapter over the chosen roles of a block.
template <class T>
std::vector<double> contribution(const ForwardCapture<T>& cap, const AdapterSet<T>& set, int block,
                                 const std::vector<Role>& roles) {
  std::vector<double> out;
  for (Role r : roles) {
    const auto& ad = set.at(attachment_id(block, r));
    const auto y = matmul(matmul(cap.layer_inputs.at(std::size_t(block))[std::size_t(r)], ad.a), ad.b);
    for (T v : y.data()) out.push_back(double(v) * double(set.lambda));
  }
  return out;
}

}  // namespace detail

/// Per block, cosine similarity of two adapters' contributions on the base
/// activations of each probe (o-projection by default).
template <class T>
SimilarityProfile layerwise_cosine(const ToyDiT<T>& model, const AdapterSet<T>& a,
                                   const AdapterSet<T>& b, const std::vector<Probe<T>>& probes,
                                   const std::vector<Role>& roles = {Role::o}) {
  validate_adapter(a, model.config);
  validate_adapter(b, model.config);
  const auto caps = detail::capture_probes(model, probes);
  SimilarityProfile prof;
  for (int blk = 0; blk < model.config.num_blocks; ++blk) {
    std::vector<double> vals(probes.size(), std::nan(""));
    double sum = 0;
    int n = 0;
    for (std::size_t s = 0; s < probes.size(); ++s) {
      const auto ca = detail::contribution(caps[s], a, blk, roles);
      const auto cb = detail::contribution(caps[s], b, blk, roles);
      try {
        vals[s] = cosine_similarity<double>(ca, cb);
        sum += vals[s];
        ++n;
      } catch (const DomainError&) {
        ++prof.excluded;
      }
    }
    BlockStat st{blk, n ? sum / n : std::nan(""), 0, n};
    if (n > 1) {
      double sq = 0;
      for (double v : vals)
        if (!std::isnan(v)) sq += (v - st.mean) * (v - st.mean);
      st.std = std::sqrt(sq / (n - 1));
    }
    prof.blocks.push_back(st);
    prof.per_sample.push_back(std::move(vals));
  }
  return prof;
}

/// Euclidean norm of each adapter's contribution per block and probe.
template <class T>
NormProfile norm_profile(const ToyDiT<T>& model, const std::vector<const AdapterSet<T>*>& adapters,
                         const std::vector<Probe<T>>& probes,
                         const std::vector<Role>& roles = {Role::o}) {
  for (const auto* a : adapters) validate_adapter(*a, model.config);
  const auto caps = detail::capture_probes(model, probes);
  NormProfile prof;
  for (const auto* a : adapters) {
    prof.adapters.push_back(a->name);
    std::vector<std::vector<double>> per_block;
    for (int blk = 0; blk < model.config.num_blocks; ++blk) {
      std::vector<double> v;
      for (const auto& cap : caps) {
        long double sq = 0;
        for (double x : detail::contribution(cap, *a, blk, roles)) sq += (long double)x * x;
        v.push_back(double(std::sqrt(sq)));
      }
      per_block.push_back(std::move(v));
    }
    prof.norms.push_back(std::move(per_block));
  }
  return prof;
}

/// Mean |cosine| over the first and second half of the blocks.
inline std::pair<double, double> half_means(const SimilarityProfile& p) {
  const std::size_t nb = p.blocks.size(), half = nb / 2;
  double lo = 0, hi = 0;
  for (std::size_t b = 0; b < nb; ++b) (b < half ? lo : hi) += std::abs(p.blocks[b].mean);
  return {lo / double(half), hi / double(nb - half)};
}

// ---------------------------------------------------------------------------
// Minimal SVG line chart

struct Series {
  std::string name;
  std::vector<double> x, y;
};

inline void write_svg_chart(std::ostream& os, const std::string& title,
                            const std::vector<Series>& series) {
  const double W = 480, H = 300, pad = 40;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]), x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]), y1 = std::max(y1, s.y[i]);
    }
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  auto px = [&](double v) { return pad + (v - x0) / (x1 - x0) * (W - 2 * pad); };
  auto py = [&](double v) { return H - pad - (v - y0) / (y1 - y0) * (H - 2 * pad); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<text x=\"" << pad << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
  os << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << W - 2 * pad << "\" height=\""
     << H - 2 * pad << "\" fill=\"none\" stroke=\"#999\"/>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    os << "<polyline fill=\"none\" stroke=\"" << colors[k % 5] << "\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) os << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    os << "\"/>\n<text x=\"" << W - pad - 100 << "\" y=\"" << pad + 15 * (k + 1) << "\" fill=\""
       << colors[k % 5] << "\" font-size=\"11\">" << s.name << "</text>\n";
  }
  os << "</svg>\n";
}

}  // namespace lion
