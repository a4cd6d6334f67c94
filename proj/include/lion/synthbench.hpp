// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic benchmark: point scenes rendered as Gaussian splats, motion
// primitives, training pairs drawn with ClipSampler, base pre-training, LoRA
// training for both amplitude-control arms, and the linearity and fusion
// experiments built on top of them.
//
// Scene coordinates live in [-1, 1]^2 with x to the right and y down the
// frame rows, so a +y offset moves content towards the bottom of the frame.

#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "lion/adapter.hpp"
#include "lion/diagnostics.hpp"
#include "lion/diffusion.hpp"
#include "lion/multifuse.hpp"
#include "lion/optim.hpp"
#include "lion/scaling.hpp"
#include "lion/toy_dit.hpp"

namespace lion {

// ---------------------------------------------------------------------------
// Scenes and primitives

enum class Primitive { static_scene, offset_h, offset_v, forward_back, orbit, object_motion };

inline constexpr std::array<Primitive, 6> kPrimitives = {
    Primitive::static_scene, Primitive::offset_h, Primitive::offset_v,
    Primitive::forward_back, Primitive::orbit,    Primitive::object_motion};

inline const char* primitive_name(Primitive p) {
  switch (p) {
    case Primitive::static_scene: return "static";
    case Primitive::offset_h: return "offset_h";
    case Primitive::offset_v: return "offset_v";
    case Primitive::forward_back: return "forward_back";
    case Primitive::orbit: return "orbit";
    case Primitive::object_motion: return "object_motion";
  }
  return "?";
}

inline Primitive parse_primitive(const std::string& s) {
  std::string valid;
  for (Primitive p : kPrimitives) {
    if (s == primitive_name(p)) return p;
    valid += (valid.empty() ? "" : ", ") + std::string(primitive_name(p));
  }
  throw ConfigError("unknown primitive '" + s + "' (valid kinds: " + valid + ")");
}

struct ScenePoint {
  double x = 0, y = 0;
  double intensity = 1;
  bool is_object = false;
};

struct Scene {
  std::vector<ScenePoint> points;
  std::uint64_t seed = 0;
};

/// Region the generator places points in. It sits off-centre so that every
/// primitive's full-clip motion stays inside [-1, 1]^2.
struct SceneBounds {
  double lo = -0.6;
  double hi = 0.2;
};

/// Deterministic scene; point 0 is the moving object for object_motion.
inline Scene generate_scene(std::uint64_t seed, int num_points = 3, SceneBounds bounds = {}) {
  if (num_points < 1) throw ConfigError("a scene needs at least one point");
  Rng rng(derive_seed(seed, "scene"));
  std::uniform_real_distribution<double> pos(bounds.lo, bounds.hi), inten(0.6, 1.0);
  Scene s;
  s.seed = seed;
  for (int i = 0; i < num_points; ++i) {
    ScenePoint p;
    p.x = pos(rng);
    p.y = pos(rng);
    p.intensity = inten(rng);
    p.is_object = i == 0;
    s.points.push_back(p);
  }
  return s;
}

struct MotionPrimitive {
  Primitive kind = Primitive::static_scene;
  double step = 0;  // per source frame: translation units, zoom rate, or radians

  /// Steps that move a full clip of N frames by 0.7 units, zoom it by 1.5x, or
  /// orbit it by 60 degrees.
  static MotionPrimitive preset(Primitive kind, int clip_length) {
    if (clip_length < 2) throw ConfigError("clip_length must be at least 2");
    const double span = double(clip_length - 1);
    switch (kind) {
      case Primitive::static_scene: return {kind, 0.0};
      case Primitive::offset_h:
      case Primitive::offset_v:
      case Primitive::object_motion: return {kind, 0.7 / span};
      case Primitive::forward_back: return {kind, 0.5 / span};
      case Primitive::orbit: return {kind, std::numbers::pi / 3.0 / span};
    }
    return {kind, 0.0};
  }
};

/// Scene points at source frame f.
inline std::vector<ScenePoint> points_at(const Scene& scene, const MotionPrimitive& m, int f) {
  std::vector<ScenePoint> out = scene.points;
  const double a = m.step * f;
  for (auto& p : out) {
    switch (m.kind) {
      case Primitive::static_scene: break;
      case Primitive::offset_h: p.x += a; break;
      case Primitive::offset_v: p.y += a; break;
      case Primitive::forward_back:
        p.x *= 1.0 + a;
        p.y *= 1.0 + a;
        break;
      case Primitive::orbit: {
        const double c = std::cos(a), s = std::sin(a);
        const double x = c * p.x - s * p.y, y = s * p.x + c * p.y;
        p.x = x;
        p.y = y;
        break;
      }
      case Primitive::object_motion:
        if (p.is_object) p.x += a;
        break;
    }
  }
  return out;
}

struct RenderOptions {
  int frame_size = 16;
  double sigma_px = 1.5;
};

/// Gaussian splats summed and clamped to [0, 1]. Points outside [-1, 1]^2 are
/// dropped and counted in *clipped.
inline void render_points(const std::vector<ScenePoint>& pts, const RenderOptions& opt, float* out,
                          int* clipped = nullptr) {
  const int F = opt.frame_size;
  const double px_per_unit = F / 2.0;
  const double inv2s2 = 1.0 / (2.0 * opt.sigma_px * opt.sigma_px);
  std::vector<double> acc(std::size_t(F * F), 0.0);
  for (const auto& p : pts) {
    if (p.x < -1 || p.x > 1 || p.y < -1 || p.y > 1) {
      if (clipped) ++*clipped;
      continue;
    }
    const double cx = (p.x + 1) * px_per_unit - 0.5, cy = (p.y + 1) * px_per_unit - 0.5;
    for (int r = 0; r < F; ++r)
      for (int c = 0; c < F; ++c) {
        const double d2 = (c - cx) * (c - cx) + (r - cy) * (r - cy);
        acc[std::size_t(r * F + c)] += p.intensity * std::exp(-d2 * inv2s2);
      }
  }
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = float(std::min(1.0, acc[i]));
}

struct FrameSequence {
  Tensor<float> frames;  // [V x F x F], values in [0, 1]
  nlohmann::json provenance = nlohmann::json::object();
};

/// The given source frames of a scene under a primitive.
inline FrameSequence render_frames(const Scene& scene, const MotionPrimitive& m,
                                   const std::vector<int>& indices, const RenderOptions& opt = {}) {
  if (indices.empty()) throw ConfigError("render_frames needs at least one index");
  const auto F = std::size_t(opt.frame_size);
  FrameSequence seq;
  seq.frames = Tensor<float>({indices.size(), F, F});
  int clipped = 0;
  for (std::size_t i = 0; i < indices.size(); ++i)
    render_points(points_at(scene, m, indices[i]), opt, seq.frames.data().data() + i * F * F, &clipped);
  seq.provenance = {{"scene_seed", scene.seed},
                    {"primitive", primitive_name(m.kind)},
                    {"step", m.step},
                    {"clipped_points", clipped}};
  return seq;
}

inline FrameSequence render_clip(const Scene& scene, const MotionPrimitive& m, int clip_length,
                                 const RenderOptions& opt = {}) {
  if (clip_length < 2) throw ConfigError("render_clip needs N >= 2");
  std::vector<int> idx(static_cast<std::size_t>(clip_length));
  std::iota(idx.begin(), idx.end(), 0);
  auto seq = render_frames(scene, m, idx, opt);
  seq.provenance["N"] = clip_length;
  return seq;
}

/// V frames of a full clip chosen by the sampler for amplitude S.
inline FrameSequence make_training_pair(const FrameSequence& clip, const ClipSampler& sampler, double s) {
  const auto idx = sample_frame_indices(sampler, s);
  const auto N = clip.frames.shape().at(0), F = clip.frames.shape().at(1);
  if (N != std::size_t(sampler.clip_length))
    throw ConfigError("clip has " + std::to_string(N) + " frames, sampler expects " +
                      std::to_string(sampler.clip_length));
  FrameSequence out;
  out.frames = Tensor<float>({idx.size(), F, F});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(clip.frames.data().data() + std::size_t(idx[i]) * F * F, F * F,
                out.frames.data().data() + i * F * F);
  out.provenance = clip.provenance;
  out.provenance["S"] = s;
  out.provenance["indices"] = idx;
  return out;
}

/// First frame of a clip as an F x F tensor.
inline Tensor<float> first_frame(const FrameSequence& seq) {
  const auto F = seq.frames.shape().at(1);
  return Tensor<float>({F, F}, std::vector<float>(seq.frames.data().begin(),
                                                  seq.frames.data().begin() + std::ptrdiff_t(F * F)));
}

struct Dataset {
  MotionPrimitive primitive;
  int clip_length = 120;
  std::vector<Scene> scenes;
  std::vector<FrameSequence> clips;
};

inline Dataset make_dataset(Primitive kind, int num_scenes, int clip_length, std::uint64_t seed,
                            const RenderOptions& opt = {}, int points_per_scene = 3) {
  if (num_scenes < 1) throw ConfigError("dataset needs at least one scene");
  Dataset ds;
  ds.primitive = MotionPrimitive::preset(kind, clip_length);
  ds.clip_length = clip_length;
  for (int i = 0; i < num_scenes; ++i) {
    ds.scenes.push_back(generate_scene(derive_seed(seed, "dataset.scene", std::uint64_t(i)), points_per_scene));
    ds.clips.push_back(render_clip(ds.scenes.back(), ds.primitive, clip_length, opt));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Clip store on disk

inline void save_clip(const FrameSequence& clip, const std::filesystem::path& path) {
  WeightFile wf;
  auto& s = wf.add_section("clip", clip.provenance);
  s.add("frames", clip.frames);
  write_weight_file(path, wf);
}

inline FrameSequence load_clip(const std::filesystem::path& path) {
  const auto wf = read_weight_file(path);
  const Section* s = wf.find("clip");
  if (!s) throw ParseError(ParseErrorKind::malformed_header, path.string() + " holds no clip section");
  return {s->get<float>("frames"), s->meta};
}

/// Writes one container per clip plus manifest.json with CRC-32 checksums.
inline nlohmann::json write_dataset(const Dataset& ds, const std::filesystem::path& dir,
                                    std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  nlohmann::json clips = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.clips.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "clip_%04zu.lw", i);
    save_clip(ds.clips[i], dir / name);
    clips.push_back({{"file", name},
                     {"scene_seed", ds.scenes[i].seed},
                     {"crc32", crc32(read_file_bytes(dir / name))}});
  }
  nlohmann::json manifest = {{"format", "lion-dataset"},
                             {"version", 1},
                             {"primitive", primitive_name(ds.primitive.kind)},
                             {"step", ds.primitive.step},
                             {"clip_length", ds.clip_length},
                             {"seed", seed},
                             {"clips", clips}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
  return manifest;
}

/// Loads every clip listed in the manifest, verifying checksums.
inline std::vector<FrameSequence> read_dataset(const std::filesystem::path& dir,
                                               nlohmann::json* manifest_out = nullptr) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("no dataset manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseErrorKind::malformed_header, std::string("manifest: ") + e.what());
  }
  std::vector<FrameSequence> clips;
  for (const auto& c : manifest.at("clips")) {
    const auto path = dir / c.at("file").get<std::string>();
    if (crc32(read_file_bytes(path)) != c.at("crc32").get<std::uint32_t>())
      throw ParseError(ParseErrorKind::checksum, path.string() + " does not match the manifest");
    clips.push_back(load_clip(path));
  }
  if (manifest_out) *manifest_out = manifest;
  return clips;
}

/// First frames of fresh static scenes, used as conditioning for evaluation.
inline std::vector<Tensor<float>> condition_frames(int count, std::uint64_t seed, const RenderOptions& opt = {},
                                                   int points_per_scene = 3) {
  const auto ds = make_dataset(Primitive::static_scene, count, 2, derive_seed(seed, "conditions"), opt,
                               points_per_scene);
  std::vector<Tensor<float>> out;
  for (const auto& c : ds.clips) out.push_back(first_frame(c));
  return out;
}

// ---------------------------------------------------------------------------
// Training

class TrainingFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Arm { scaling_token, adapter_scale };

inline const char* arm_name(Arm a) { return a == Arm::scaling_token ? "scaling_token" : "adapter_scale"; }

inline Arm parse_arm(const std::string& s) {
  if (s == "scaling_token") return Arm::scaling_token;
  if (s == "adapter_scale") return Arm::adapter_scale;
  throw ConfigError("unknown arm '" + s + "' (expected scaling_token or adapter_scale)");
}

struct TrainConfig {
  int steps = 2000;
  double lr = 5e-4;
  int batch = 4;
  int rank = 8;
  std::uint64_t seed = 0;
  Arm arm = Arm::scaling_token;
  int num_freqs = 8;
  double clip_norm = 1.0;

  void validate() const {
    if (steps < 0) throw ConfigError("train.steps must be non-negative");
    if (!(lr > 0)) throw ConfigError("train.lr must be positive");
    if (batch < 1) throw ConfigError("train.batch must be positive");
    if (rank < 1) throw ConfigError("train.rank must be positive");
    if (num_freqs < 1) throw ConfigError("train.num_freqs must be positive");
    if (clip_norm < 0) throw ConfigError("train.clip_norm must be non-negative");
  }
};

struct PretrainConfig {
  int steps = 3000;
  double lr = 1e-3;
  int batch = 4;
  std::uint64_t seed = 0;
  double clip_norm = 1.0;
  int warmup = 100;
};

namespace detail {

/// Patch rows of a [V x F x F] tensor, the layout forward() predicts.
template <class T>
Tensor<T> patch_rows(const Tensor<T>& frames, const ModelConfig& cfg) {
  const auto full = patchify(frames, cfg);
  const auto w = full.shape()[1];
  return Tensor<T>({full.shape()[0] - 1, w},
                   std::vector<T>(full.data().begin() + std::ptrdiff_t(w), full.data().end()));
}

/// One noised training example.
struct Example {
  Tensor<float> noisy_tokens;
  Tensor<float> cond_latent;
  Tensor<float> target;
  int timestep;
  double s;
};

inline Example draw_example(const ModelConfig& cfg, const NoiseSchedule& sched,
                            const std::vector<FrameSequence>& clips, const ClipSampler& sampler,
                            Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, clips.size() - 1);
  std::uniform_real_distribution<double> u(sampler.min_scale(), 1.0);
  std::uniform_int_distribution<int> tdist(0, cfg.diffusion_steps - 1);
  const auto& clip = clips[pick(rng)];
  const double s = u(rng);
  const auto pair = make_training_pair(clip, sampler, s);
  const auto latent = to_latent(pair.frames);
  const int t = tdist(rng);
  const auto noise = normal_tensor<float>(latent.shape(), 1.0, rng);
  return {patchify(q_sample(sched, latent, t, noise), cfg), to_latent(first_frame(pair)),
          patch_rows(noise, cfg), t, s};
}

inline void check_clips(const ModelConfig& cfg, const std::vector<FrameSequence>& clips,
                        const ClipSampler& sampler) {
  if (clips.empty()) throw ConfigError("training needs at least one clip");
  sampler.validate();
  if (sampler.frames != cfg.frames)
    throw ConfigError("sampler draws " + std::to_string(sampler.frames) + " frames, model expects " +
                      std::to_string(cfg.frames));
  for (const auto& c : clips)
    if (c.frames.shape() != Shape{std::size_t(sampler.clip_length), std::size_t(cfg.frame_size),
                                  std::size_t(cfg.frame_size)})
      throw ConfigError("clip " + shape_str(c.frames.shape()) + " does not match sampler and model");
}

/// Divergence: loss above ten times the first loss for 100 consecutive steps.
struct DivergenceWatch {
  double first = -1;
  int run = 0;
  void observe(double loss, int step) {
    if (!std::isfinite(loss)) throw TrainingFailure("non-finite loss at step " + std::to_string(step));
    if (first < 0) first = loss;
    run = loss > 10 * first ? run + 1 : 0;
    if (run >= 100)
      throw TrainingFailure("loss above 10x its initial value for 100 steps (step " +
                            std::to_string(step) + ")");
  }
};

}  // namespace detail

struct PretrainResult {
  ToyDiT<float> model;
  std::vector<double> losses;
};

/// Trains every base parameter on the given clips (static scenes by design).
inline PretrainResult pretrain_base(const ModelConfig& mcfg, const std::vector<FrameSequence>& clips,
                                    const ClipSampler& sampler, const PretrainConfig& cfg) {
  detail::check_clips(mcfg, clips, sampler);
  PretrainResult res{ToyDiT<float>::init(mcfg, derive_seed(cfg.seed, "pretrain.init")), {}};
  std::vector<Tensor<float>*> params;
  res.model.for_each_parameter([&](const std::string&, Tensor<float>& t) { params.push_back(&t); });
  Adam<float> opt(params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.clip_norm});
  const auto sched = NoiseSchedule::compressed(mcfg.diffusion_steps);
  detail::DivergenceWatch watch;
  for (int step = 0; step < cfg.steps; ++step) {
    const double warm = cfg.warmup > 0 ? std::min(1.0, double(step + 1) / cfg.warmup) : 1.0;
    const double decay = 0.55 + 0.45 * std::cos(std::numbers::pi * step / std::max(1, cfg.steps));
    opt.set_lr(cfg.lr * warm * decay);
    Rng rng(derive_seed(cfg.seed, "pretrain.step", std::uint64_t(step)));
    std::vector<detail::Example> batch;
    for (int b = 0; b < cfg.batch; ++b) batch.push_back(detail::draw_example(mcfg, sched, clips, sampler, rng));
    std::vector<std::vector<Tensor<float>>> grads(batch.size());
    std::vector<double> losses(batch.size());
    parallel_for(batch.size(), [&](std::size_t b) {
      Tape<float> tape;
      auto bm = bind_model(tape, res.model, true);
      auto loss = ad::mse(forward(bm, batch[b].noisy_tokens, batch[b].cond_latent, batch[b].timestep),
                          batch[b].target);
      tape.backward(loss);
      losses[b] = loss.value()[0];
      auto& g = grads[b];
      auto lin = [&](const BoundLinear<float>& l) {
        g.push_back(tape.grad(l.w));
        g.push_back(tape.grad(l.b));
      };
      lin(bm.patch_embed);
      lin(bm.cond_embed);
      lin(bm.time_proj);
      g.push_back(tape.grad(bm.pos_embed));
      for (const auto& blk : bm.blocks)
        for (const auto& l : blk) lin(l);
      lin(bm.head);
    });
    auto total = std::move(grads[0]);
    double loss = losses[0];
    for (std::size_t b = 1; b < batch.size(); ++b) {
      loss += losses[b];
      for (std::size_t i = 0; i < total.size(); ++i) total[i] = total[i] + grads[b][i];
    }
    for (auto& g : total) g = float(1.0 / double(batch.size())) * g;
    loss /= double(batch.size());
    watch.observe(loss, step);
    res.losses.push_back(loss);
    opt.step(total);
  }
  return res;
}

struct TrainResult {
  AdapterSet<float> adapter;
  std::optional<ScalingEmbedder<float>> embedder;  // scaling_token arm only
  std::vector<double> losses;
};

/// Trains one adapter (and, in the scaling-token arm, its embedder) on a
/// frozen base model. S is drawn uniformly from [s, 1] per example; the
/// adapter-scale arm injects it as the adapter multiplier instead of a token.
inline TrainResult train_lora(const ToyDiT<float>& model, const std::vector<FrameSequence>& clips,
                              const ClipSampler& sampler, const TrainConfig& cfg,
                              const std::string& name) {
  cfg.validate();
  const auto& mcfg = model.config;
  detail::check_clips(mcfg, clips, sampler);
  TrainResult res;
  res.adapter = init_adapter<float>(mcfg, cfg.rank, derive_seed(cfg.seed, "lora.adapter"), name);
  res.adapter.provenance = {{"arm", arm_name(cfg.arm)}, {"steps", cfg.steps},   {"lr", cfg.lr},
                            {"batch", cfg.batch},       {"seed", cfg.seed},     {"rank", cfg.rank},
                            {"clip_length", sampler.clip_length}, {"frames", sampler.frames}};
  if (cfg.arm == Arm::scaling_token)
    res.embedder = ScalingEmbedder<float>::init(name, cfg.num_freqs, mcfg.channels, sampler,
                                                derive_seed(cfg.seed, "lora.embedder"));
  const auto ids = res.adapter.ids();
  std::vector<Tensor<float>*> params;
  for (const auto& id : ids) {
    params.push_back(&res.adapter.points.at(id).a);
    params.push_back(&res.adapter.points.at(id).b);
  }
  if (res.embedder) {
    params.push_back(&res.embedder->proj);
    params.push_back(&res.embedder->bias);
  }
  Adam<float> opt(params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.clip_norm});
  const auto sched = NoiseSchedule::compressed(mcfg.diffusion_steps);
  detail::DivergenceWatch watch;
  for (int step = 0; step < cfg.steps; ++step) {
    Rng rng(derive_seed(cfg.seed, "lora.step", std::uint64_t(step)));
    std::vector<detail::Example> batch;
    for (int b = 0; b < cfg.batch; ++b) batch.push_back(detail::draw_example(mcfg, sched, clips, sampler, rng));
    std::vector<std::vector<Tensor<float>>> grads(batch.size());
    std::vector<double> losses(batch.size());
    parallel_for(batch.size(), [&](std::size_t b) {
      const auto& ex = batch[b];
      Tape<float> tape;
      auto bm = bind_model(tape, model, false);
      const float coef = cfg.arm == Arm::adapter_scale ? float(ex.s) : 1.0f;
      Injection<float> inj;
      inj.blocks.resize(std::size_t(mcfg.num_blocks));
      std::vector<Var<float>> leaves;
      for (const auto& id : ids) {
        const auto where = *parse_attachment_id(mcfg, id);
        const auto& pt = res.adapter.points.at(id);
        auto a = tape.leaf(pt.a, true), bb = tape.leaf(pt.b, true);
        leaves.push_back(a);
        leaves.push_back(bb);
        inj.blocks[std::size_t(where.first)][std::size_t(where.second)].push_back({a, bb, coef});
      }
      std::vector<Var<float>> tokens;
      if (res.embedder) {
        auto p = tape.leaf(res.embedder->proj, true), bias = tape.leaf(res.embedder->bias, true);
        leaves.push_back(p);
        leaves.push_back(bias);
        tokens.push_back(scaling_token_var(p, bias, ex.s, res.embedder->num_freqs));
      }
      auto loss = ad::mse(forward(bm, ex.noisy_tokens, ex.cond_latent, ex.timestep, &inj,
                                  std::span<const Var<float>>(tokens)),
                          ex.target);
      tape.backward(loss);
      losses[b] = loss.value()[0];
      for (const auto& v : leaves) grads[b].push_back(tape.grad(v));
    });
    auto total = std::move(grads[0]);
    double loss = losses[0];
    for (std::size_t b = 1; b < batch.size(); ++b) {
      loss += losses[b];
      for (std::size_t i = 0; i < total.size(); ++i) total[i] = total[i] + grads[b][i];
    }
    for (auto& g : total) g = float(1.0 / double(batch.size())) * g;
    loss /= double(batch.size());
    watch.observe(loss, step);
    res.losses.push_back(loss);
    opt.step(total);
  }
  return res;
}

/// Mean of the last `window` losses against the first `window`.
inline std::pair<double, double> loss_endpoints(const std::vector<double>& losses, std::size_t window = 100) {
  if (losses.empty()) return {0, 0};
  window = std::min(window, losses.size());
  double a = 0, b = 0;
  for (std::size_t i = 0; i < window; ++i) {
    a += losses[i] / double(window);
    b += losses[losses.size() - 1 - i] / double(window);
  }
  return {a, b};
}

// ---------------------------------------------------------------------------
// Generation and experiments

/// Single-adapter branch for amplitude S under either arm.
inline BranchSpec<float> amplitude_branch(const ModelConfig& cfg, const AdapterSet<float>& adapter,
                                          const ScalingEmbedder<float>* embedder, Arm arm, double s) {
  if (arm == Arm::scaling_token) {
    if (!embedder) throw ConfigError("scaling_token arm needs an embedder");
    auto spec = branch_spec(adapter, cfg, adapter.lambda);
    spec.token = make_scaling_token(*embedder, s).embedding;
    return spec;
  }
  return branch_spec(adapter, cfg, float(s));
}

struct LinearityRow {
  double s = 0;
  double magnitude = 0;                // mean over condition frames
  std::vector<double> per_condition;   // NaN when the centroid was undefined
  std::vector<std::vector<Point2>> paths;  // per condition, empty when undefined
};

struct LinearityReport {
  std::string arm;
  std::vector<LinearityRow> rows;
  double r = std::nan("");
  int excluded = 0;
};

struct EvalOptions {
  int ddim_steps = 50;
  std::uint64_t seed = 0;
};

/// Generates at every S of the grid from every condition frame and correlates
/// S with the mean centroid displacement.
inline LinearityReport eval_linearity(const ToyDiT<float>& model, const AdapterSet<float>& adapter,
                                      const ScalingEmbedder<float>* embedder, Arm arm,
                                      const std::vector<double>& s_grid,
                                      const std::vector<Tensor<float>>& conditions,
                                      const ClipSampler& sampler, const EvalOptions& opt = {}) {
  if (s_grid.size() < 5) throw ConfigError("linearity needs at least five S values");
  for (double s : s_grid) sampler.check_scale(s);
  if (conditions.empty()) throw ConfigError("linearity needs at least one condition frame");
  LinearityReport rep;
  rep.arm = arm_name(arm);
  rep.rows.resize(s_grid.size());
  const std::size_t jobs = s_grid.size() * conditions.size();
  std::vector<double> mags(jobs);
  std::vector<std::vector<Point2>> paths(jobs);
  parallel_for(jobs, [&](std::size_t j) {
    const std::size_t si = j / conditions.size(), ci = j % conditions.size();
    const auto spec = amplitude_branch(model.config, adapter, embedder, arm, s_grid[si]);
    const auto frames = ddim_sample(model, conditions[ci], opt.ddim_steps, &spec,
                                    derive_seed(opt.seed, "eval.noise", ci));
    try {
      paths[j] = centroid_trajectory(frames);
      mags[j] = motion_magnitude(paths[j]);
    } catch (const UndefinedStatisticError&) {
      paths[j].clear();
      mags[j] = std::nan("");
    }
  });
  std::vector<double> xs, ys;
  for (std::size_t si = 0; si < s_grid.size(); ++si) {
    auto& row = rep.rows[si];
    row.s = s_grid[si];
    double sum = 0;
    int n = 0;
    for (std::size_t ci = 0; ci < conditions.size(); ++ci) {
      const double m = mags[si * conditions.size() + ci];
      row.per_condition.push_back(m);
      row.paths.push_back(std::move(paths[si * conditions.size() + ci]));
      if (std::isnan(m)) {
        ++rep.excluded;
        continue;
      }
      sum += m;
      ++n;
    }
    row.magnitude = n ? sum / n : std::nan("");
    if (n) {
      xs.push_back(row.s);
      ys.push_back(row.magnitude);
    }
  }
  try {
    rep.r = pearson(xs, ys);
  } catch (const std::exception&) {
    rep.r = std::nan("");
  }
  return rep;
}

inline void write_linearity_csv(std::ostream& os, const std::vector<LinearityReport>& reports) {
  os << "arm,row,S,magnitude,pearson_r\n" << std::setprecision(12);
  for (const auto& rep : reports) {
    for (const auto& row : rep.rows) os << rep.arm << ",magnitude," << row.s << ',' << row.magnitude << ",\n";
    os << rep.arm << ",summary,,," << rep.r << '\n';
  }
}

/// Rows "label,S,condition,frame,x,y" for one centroid path.
inline void write_trajectory_rows(std::ostream& os, const std::string& label, double s, std::size_t condition,
                                  const std::vector<Point2>& path) {
  os << std::setprecision(12);
  for (std::size_t f = 0; f < path.size(); ++f)
    os << label << ',' << s << ',' << condition << ',' << f << ',' << path[f].x << ',' << path[f].y << '\n';
}

struct FusionSample {
  std::uint64_t seed = 0;
  double direction_deg = std::nan("");
  double smoothness = std::nan("");
  double magnitude = std::nan("");
};

struct FusionEval {
  std::string mode;
  std::vector<FusionSample> samples;

  double mean_direction() const {
    double sx = 0, sy = 0;
    for (const auto& s : samples)
      if (!std::isnan(s.direction_deg)) {
        sx += std::cos(s.direction_deg * std::numbers::pi / 180);
        sy += std::sin(s.direction_deg * std::numbers::pi / 180);
      }
    return std::atan2(sy, sx) * 180 / std::numbers::pi;
  }
};

inline FusionSample measure_clip(const Tensor<float>& frames, std::uint64_t seed) {
  FusionSample s;
  s.seed = seed;
  try {
    const auto path = centroid_trajectory(frames);
    s.magnitude = motion_magnitude(path);
    s.direction_deg = mean_direction_deg(path);
    if (path.size() >= 3) s.smoothness = trajectory_smoothness(path);
  } catch (const UndefinedStatisticError&) {
  }
  return s;
}

/// Fused generation of scaling-token adapters at the given amplitudes, one
/// clip per condition frame, under one fusion mode.
inline FusionEval eval_fusion_direction(const ToyDiT<float>& model,
                                        const std::vector<const AdapterSet<float>*>& adapters,
                                        const std::vector<const ScalingEmbedder<float>*>& embedders,
                                        const std::vector<double>& scales, FusionMode mode,
                                        const std::vector<Tensor<float>>& conditions,
                                        const EvalOptions& opt = {},
                                        AveragingScope scope = AveragingScope::full_block) {
  if (adapters.size() != embedders.size() || adapters.size() != scales.size())
    throw FusionError("adapters, embedders and scales must have equal counts");
  FusedContext<float> ctx;
  ctx.plan.adapters = adapters;
  ctx.plan.mode = mode;
  ctx.scope = scope;
  for (std::size_t i = 0; i < adapters.size(); ++i)
    ctx.tokens.push_back(make_scaling_token(*embedders[i], scales[i]).embedding);
  FusionEval ev;
  ev.mode = fusion_mode_name(mode);
  ev.samples.resize(conditions.size());
  parallel_for(conditions.size(), [&](std::size_t c) {
    const auto seed = derive_seed(opt.seed, "eval.noise", c);
    ev.samples[c] = measure_clip(fused_ddim_sample(model, conditions[c], opt.ddim_steps, ctx, seed), seed);
  });
  return ev;
}

/// Probe inputs for activation diagnostics: noised static clips at random timesteps.
inline std::vector<Probe<float>> make_probes(const ModelConfig& cfg, const std::vector<FrameSequence>& clips,
                                             const ClipSampler& sampler, int count, std::uint64_t seed) {
  detail::check_clips(cfg, clips, sampler);
  const auto sched = NoiseSchedule::compressed(cfg.diffusion_steps);
  Rng rng(derive_seed(seed, "probes"));
  std::vector<Probe<float>> out;
  for (int i = 0; i < count; ++i) {
    const auto ex = detail::draw_example(cfg, sched, clips, sampler, rng);
    out.push_back({unpatchify(ex.noisy_tokens, cfg), ex.cond_latent, ex.timestep});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Artifacts

inline void save_base(const ToyDiT<float>& model, const std::filesystem::path& path) {
  WeightFile wf;
  wf.sections.push_back(model.to_section());
  write_weight_file(path, wf);
}

inline ToyDiT<float> load_base(const std::filesystem::path& path) {
  const auto wf = read_weight_file(path);
  const Section* s = wf.find("model");
  if (!s) throw ParseError(ParseErrorKind::malformed_header, path.string() + " holds no model section");
  return ToyDiT<float>::from_section(*s);
}

/// One adapter file: the adapter section plus, for the token arm, its embedder.
struct TrainedAdapter {
  AdapterSet<float> adapter;
  std::optional<ScalingEmbedder<float>> embedder;

  Arm arm() const { return embedder ? Arm::scaling_token : Arm::adapter_scale; }
  const ScalingEmbedder<float>* embedder_ptr() const { return embedder ? &*embedder : nullptr; }
};

inline void save_trained(const TrainedAdapter& t, const std::filesystem::path& path) {
  WeightFile wf;
  wf.sections.push_back(adapter_section(t.adapter));
  if (t.embedder) wf.sections.push_back(t.embedder->to_section());
  write_weight_file(path, wf);
}

inline TrainedAdapter load_trained(const std::filesystem::path& path, const ModelConfig& cfg) {
  const auto wf = read_weight_file(path);
  const auto ads = wf.with_prefix("adapter/");
  if (ads.empty()) throw ParseError(ParseErrorKind::malformed_header, path.string() + " holds no adapter section");
  TrainedAdapter t{adapter_from_section<float>(*ads.front()), std::nullopt};
  validate_adapter(t.adapter, cfg);
  const auto sc = wf.with_prefix("scaling/");
  if (!sc.empty()) {
    t.embedder = ScalingEmbedder<float>::from_section(*sc.front());
    if (t.embedder->channels() != std::size_t(cfg.channels))
      throw DimensionError("embedder width " + std::to_string(t.embedder->channels()) + " vs model " +
                           std::to_string(cfg.channels));
  }
  return t;
}

}  // namespace lion
