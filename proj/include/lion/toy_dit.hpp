// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0
//
// A small diffusion transformer over patchified frame clips.
//
// Token layout for a clip of V frames of F x F pixels with patch size p:
//   row 0                 condition token (embedding of the clean first frame)
//   rows 1 .. V*(F/p)^2   frame patches, frame-major, raster order
//   trailing rows         optional scaling tokens, one per active adapter
// Every linear layer inside a block is an adapter attachment point named
// "blocks.<index>.<role>".

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "lion/autograd.hpp"
#include "lion/common.hpp"
#include "lion/weight_file.hpp"

namespace lion {

/// Unknown attachment point, or adapter weights that do not fit the model.
class AttachmentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  int num_blocks = 6;
  int channels = 64;
  int heads = 4;
  int frames = 13;
  int frame_size = 16;
  int patch_size = 4;
  int diffusion_steps = 200;
  int mlp_ratio = 4;

  int grid() const { return frame_size / patch_size; }
  int patches_per_frame() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size; }
  int tokens() const { return frames * patches_per_frame() + 1; }
  int head_dim() const { return channels / heads; }
  int hidden() const { return channels * mlp_ratio; }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw ConfigError(std::string("model.") + name + " must be positive");
    };
    positive(num_blocks, "num_blocks");
    positive(channels, "channels");
    positive(heads, "heads");
    positive(frames, "frames");
    positive(frame_size, "frame_size");
    positive(patch_size, "patch_size");
    positive(diffusion_steps, "diffusion_steps");
    positive(mlp_ratio, "mlp_ratio");
    if (channels % heads != 0) throw ConfigError("model.channels must be divisible by model.heads");
    if (frame_size % patch_size != 0)
      throw ConfigError("model.frame_size must be divisible by model.patch_size");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"num_blocks", c.num_blocks}, {"channels", c.channels},   {"heads", c.heads},
       {"frames", c.frames},         {"frame_size", c.frame_size}, {"patch_size", c.patch_size},
       {"diffusion_steps", c.diffusion_steps}, {"mlp_ratio", c.mlp_ratio}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    int* slot = key == "num_blocks"        ? &c.num_blocks
                : key == "channels"        ? &c.channels
                : key == "heads"           ? &c.heads
                : key == "frames"          ? &c.frames
                : key == "frame_size"      ? &c.frame_size
                : key == "patch_size"      ? &c.patch_size
                : key == "diffusion_steps" ? &c.diffusion_steps
                : key == "mlp_ratio"       ? &c.mlp_ratio
                                           : nullptr;
    if (!slot) throw ConfigError("unknown model config key '" + key + "'");
    if (!value.is_number_integer()) throw ConfigError("model." + key + " must be an integer");
    *slot = value.get<int>();
  }
}

enum class Role : int { q = 0, k, v, o, mlp_in, mlp_out };
inline constexpr int kNumRoles = 6;
inline constexpr std::array<Role, kNumRoles> kRoles = {Role::q,  Role::k,      Role::v,
                                                      Role::o,  Role::mlp_in, Role::mlp_out};

inline const char* role_name(Role r) {
  static constexpr const char* names[] = {"q", "k", "v", "o", "mlp_in", "mlp_out"};
  return names[int(r)];
}

inline std::string attachment_id(int block, Role role) {
  return "blocks." + std::to_string(block) + "." + role_name(role);
}

inline std::vector<std::string> attachment_ids(const ModelConfig& cfg) {
  std::vector<std::string> ids;
  for (int b = 0; b < cfg.num_blocks; ++b)
    for (Role r : kRoles) ids.push_back(attachment_id(b, r));
  return ids;
}

/// (block, role) for a valid attachment id of cfg, nullopt otherwise.
inline std::optional<std::pair<int, Role>> parse_attachment_id(const ModelConfig& cfg,
                                                              const std::string& id) {
  for (int b = 0; b < cfg.num_blocks; ++b)
    for (Role r : kRoles)
      if (attachment_id(b, r) == id) return std::make_pair(b, r);
  return std::nullopt;
}

/// (d_in, d_out) of the linear layer behind a role.
inline std::pair<std::size_t, std::size_t> attachment_dims(const ModelConfig& cfg, Role r) {
  const auto d = std::size_t(cfg.channels), h = std::size_t(cfg.hidden());
  if (r == Role::mlp_in) return {d, h};
  if (r == Role::mlp_out) return {h, d};
  return {d, d};
}

template <class T>
struct LinearLayer {
  std::string id;
  Tensor<T> weight;  // d_in x d_out
  Tensor<T> bias;    // d_out
};

template <class T>
struct ToyDiT {
  ModelConfig config;
  LinearLayer<T> patch_embed;
  LinearLayer<T> cond_embed;
  LinearLayer<T> time_proj;
  LinearLayer<T> head;
  Tensor<T> pos_embed;
  std::vector<std::array<LinearLayer<T>, kNumRoles>> blocks;

  static ToyDiT init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, "toy_dit.init"));
    const auto d = std::size_t(cfg.channels);
    auto make = [&](std::string id, std::size_t in, std::size_t out, double gain) {
      return LinearLayer<T>{std::move(id), normal_tensor<T>({in, out}, gain / std::sqrt(double(in)), rng),
                            Tensor<T>({out})};
    };
    ToyDiT m;
    m.config = cfg;
    m.patch_embed = make("patch_embed", std::size_t(cfg.patch_dim()), d, 1.0);
    m.cond_embed = make("cond_embed", std::size_t(cfg.frame_size * cfg.frame_size), d, 1.0);
    m.time_proj = make("time_proj", d, d, 1.0);
    m.head = make("head", d, std::size_t(cfg.patch_dim()), 0.1);
    m.pos_embed = normal_tensor<T>({std::size_t(cfg.tokens()), d}, 0.5, rng);
    for (int b = 0; b < cfg.num_blocks; ++b) {
      std::array<LinearLayer<T>, kNumRoles> layers;
      for (Role r : kRoles) {
        const auto [in, out] = attachment_dims(cfg, r);
        const double gain = (r == Role::o || r == Role::mlp_out) ? 0.5 : 1.0;
        layers[int(r)] = make(attachment_id(b, r), in, out, gain);
      }
      m.blocks.push_back(std::move(layers));
    }
    return m;
  }

  const LinearLayer<T>& attachment(const std::string& id) const {
    const auto where = parse_attachment_id(config, id);
    if (!where) throw AttachmentError("unknown attachment point '" + id + "'");
    return blocks[std::size_t(where->first)][std::size_t(where->second)];
  }

  /// Visits every parameter as (name, tensor) in a fixed order.
  template <class F>
  void for_each_parameter(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void for_each_parameter(F&& f) const {
    visit_impl(*this, f);
  }

  template <class U>
  ToyDiT<U> cast() const {
    auto conv = [](const LinearLayer<T>& l) {
      return LinearLayer<U>{l.id, l.weight.template cast<U>(), l.bias.template cast<U>()};
    };
    ToyDiT<U> m;
    m.config = config;
    m.patch_embed = conv(patch_embed);
    m.cond_embed = conv(cond_embed);
    m.time_proj = conv(time_proj);
    m.head = conv(head);
    m.pos_embed = pos_embed.template cast<U>();
    for (const auto& blk : blocks) {
      std::array<LinearLayer<U>, kNumRoles> out;
      for (int r = 0; r < kNumRoles; ++r) out[std::size_t(r)] = conv(blk[std::size_t(r)]);
      m.blocks.push_back(std::move(out));
    }
    return m;
  }

  /// CRC-32 over all parameter bytes; equal checksums mean untouched weights.
  std::uint32_t checksum() const {
    boost::crc_32_type crc;
    for_each_parameter([&](const std::string&, const Tensor<T>& t) {
      crc.process_bytes(t.data().data(), t.size() * sizeof(T));
    });
    return crc.checksum();
  }

  Section to_section(std::string name = "model") const {
    Section s{std::move(name), {{"config", config}}, {}};
    for_each_parameter([&](const std::string& n, const Tensor<T>& t) { s.add(n, t); });
    return s;
  }

  static ToyDiT from_section(const Section& s) {
    ModelConfig cfg;
    try {
      cfg = s.meta.at("config").get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(ParseErrorKind::malformed_header, std::string("model config: ") + e.what());
    }
    ToyDiT m = init(cfg, 0);
    m.for_each_parameter([&](const std::string& n, Tensor<T>& t) {
      const auto& stored = s.get<T>(n);
      if (stored.shape() != t.shape())
        throw AttachmentError("checkpoint tensor " + n + " has shape " + shape_str(stored.shape()) +
                              ", model expects " + shape_str(t.shape()));
      t = stored;
    });
    return m;
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    auto lin = [&](auto& l) {
      f(l.id + ".weight", l.weight);
      f(l.id + ".bias", l.bias);
    };
    lin(self.patch_embed);
    lin(self.cond_embed);
    lin(self.time_proj);
    f(std::string("pos_embed"), self.pos_embed);
    for (auto& blk : self.blocks)
      for (auto& l : blk) lin(l);
    lin(self.head);
  }
};

// ---------------------------------------------------------------------------
// Token layout

/// [V x F x F] frames -> [n x p^2] rows; row 0 is the zero-filled condition slot.
template <class T>
Tensor<T> patchify(const Tensor<T>& frames, const ModelConfig& cfg) {
  const auto V = std::size_t(cfg.frames), F = std::size_t(cfg.frame_size),
             p = std::size_t(cfg.patch_size), g = std::size_t(cfg.grid());
  if (frames.shape() != Shape{V, F, F})
    throw ConfigError("patchify: frames " + shape_str(frames.shape()) + " do not match config " +
                      shape_str({V, F, F}));
  Tensor<T> out({std::size_t(cfg.tokens()), p * p});
  std::size_t row = 1;
  for (std::size_t f = 0; f < V; ++f)
    for (std::size_t py = 0; py < g; ++py)
      for (std::size_t px = 0; px < g; ++px, ++row)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            out(row, y * p + x) = frames[(f * F + py * p + y) * F + px * p + x];
  return out;
}

/// Inverse of patchify. Accepts either all n rows or only the n - 1 patch rows.
template <class T>
Tensor<T> unpatchify(const Tensor<T>& tokens, const ModelConfig& cfg) {
  const auto V = std::size_t(cfg.frames), F = std::size_t(cfg.frame_size),
             p = std::size_t(cfg.patch_size), g = std::size_t(cfg.grid());
  const auto n = std::size_t(cfg.tokens());
  if (tokens.rank() != 2 || tokens.shape()[1] != p * p ||
      (tokens.shape()[0] != n && tokens.shape()[0] != n - 1))
    throw ConfigError("unpatchify: tokens " + shape_str(tokens.shape()) + " do not match config");
  std::size_t row = tokens.shape()[0] == n ? 1 : 0;
  Tensor<T> frames({V, F, F});
  for (std::size_t f = 0; f < V; ++f)
    for (std::size_t py = 0; py < g; ++py)
      for (std::size_t px = 0; px < g; ++px, ++row)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            frames[(f * F + py * p + y) * F + px * p + x] = tokens(row, y * p + x);
  return frames;
}

// ---------------------------------------------------------------------------
// Forward pass on a tape

template <class T>
struct BoundLinear {
  Var<T> w, b;
};

template <class T>
struct BoundModel {
  const ModelConfig* config = nullptr;
  BoundLinear<T> patch_embed, cond_embed, time_proj, head;
  Var<T> pos_embed;
  std::vector<std::array<BoundLinear<T>, kNumRoles>> blocks;
};

/// Places the model parameters on a tape as leaves.
template <class T>
BoundModel<T> bind_model(Tape<T>& tape, const ToyDiT<T>& m, bool trainable = false) {
  BoundModel<T> bm;
  bm.config = &m.config;
  auto lin = [&](const LinearLayer<T>& l) {
    return BoundLinear<T>{tape.leaf(l.weight, trainable), tape.leaf(l.bias, trainable)};
  };
  bm.patch_embed = lin(m.patch_embed);
  bm.cond_embed = lin(m.cond_embed);
  bm.time_proj = lin(m.time_proj);
  bm.pos_embed = tape.leaf(m.pos_embed, trainable);
  for (const auto& blk : m.blocks) {
    std::array<BoundLinear<T>, kNumRoles> out;
    for (int r = 0; r < kNumRoles; ++r) out[std::size_t(r)] = lin(blk[std::size_t(r)]);
    bm.blocks.push_back(out);
  }
  bm.head = lin(m.head);
  return bm;
}

/// One low-rank contribution coef * (x A) B added to a linear layer.
template <class T>
struct LoraTerm {
  Var<T> a, b;
  T coef;
};

template <class T>
using LayerTerms = std::array<std::vector<LoraTerm<T>>, kNumRoles>;

/// Low-rank terms per block and role; an empty injection is the base model.
template <class T>
struct Injection {
  std::vector<LayerTerms<T>> blocks;

  const std::vector<LoraTerm<T>>* at(std::size_t block, Role r) const {
    return block < blocks.size() ? &blocks[block][std::size_t(r)] : nullptr;
  }
};

/// Optional record of intermediate values, filled during forward.
template <class T>
struct ForwardCapture {
  std::vector<std::array<Tensor<T>, kNumRoles>> layer_inputs;  // per block, per role
  std::vector<std::vector<Tensor<T>>> attention;               // per block, per head
};

template <class T>
Var<T> apply_linear(Var<T> x, const BoundLinear<T>& l, const std::vector<LoraTerm<T>>* terms) {
  auto y = ad::matmul(x, l.w);
  if (terms)
    for (const auto& term : *terms)
      if (term.coef != T(0)) y = ad::add(y, ad::scale(ad::matmul(ad::matmul(x, term.a), term.b), term.coef));
  return ad::add_bias(y, l.b);
}

namespace detail {

template <class T>
void capture_input(ForwardCapture<T>* cap, std::size_t block, Role r, Var<T> x) {
  if (!cap) return;
  if (cap->layer_inputs.size() <= block) cap->layer_inputs.resize(block + 1);
  cap->layer_inputs[block][std::size_t(r)] = x.value();
}

}  // namespace detail

/// h + o(MHA(LN(h))) for one block.
template <class T>
Var<T> attention_stage(const BoundModel<T>& m, std::size_t block, Var<T> h,
                       const Injection<T>* inj, ForwardCapture<T>* cap = nullptr) {
  const auto& cfg = *m.config;
  const auto& L = m.blocks.at(block);
  auto terms = [&](Role r) { return inj ? inj->at(block, r) : nullptr; };
  auto x = ad::layer_norm_rows(h);
  detail::capture_input(cap, block, Role::q, x);
  detail::capture_input(cap, block, Role::k, x);
  detail::capture_input(cap, block, Role::v, x);
  auto q = apply_linear(x, L[int(Role::q)], terms(Role::q));
  auto k = apply_linear(x, L[int(Role::k)], terms(Role::k));
  auto v = apply_linear(x, L[int(Role::v)], terms(Role::v));
  const auto dh = std::size_t(cfg.head_dim());
  const T inv_sqrt = T(1) / std::sqrt(T(dh));
  std::vector<Var<T>> heads;
  if (cap) {
    if (cap->attention.size() <= block) cap->attention.resize(block + 1);
    cap->attention[block].clear();
  }
  for (std::size_t hh = 0; hh < std::size_t(cfg.heads); ++hh) {
    auto qs = ad::slice_cols(q, hh * dh, (hh + 1) * dh);
    auto ks = ad::slice_cols(k, hh * dh, (hh + 1) * dh);
    auto vs = ad::slice_cols(v, hh * dh, (hh + 1) * dh);
    auto p = ad::softmax_rows(ad::scale(ad::matmul_nt(qs, ks), inv_sqrt));
    if (cap) cap->attention[block].push_back(p.value());
    heads.push_back(ad::matmul(p, vs));
  }
  auto att = heads.size() == 1 ? heads.front() : ad::concat_cols(heads);
  detail::capture_input(cap, block, Role::o, att);
  return ad::add(h, apply_linear(att, L[int(Role::o)], terms(Role::o)));
}

/// h + mlp_out(GELU(mlp_in(LN(h)))) for one block.
template <class T>
Var<T> mlp_stage(const BoundModel<T>& m, std::size_t block, Var<T> h, const Injection<T>* inj,
                 ForwardCapture<T>* cap = nullptr) {
  const auto& L = m.blocks.at(block);
  auto terms = [&](Role r) { return inj ? inj->at(block, r) : nullptr; };
  auto x = ad::layer_norm_rows(h);
  detail::capture_input(cap, block, Role::mlp_in, x);
  auto hidden = ad::gelu(apply_linear(x, L[int(Role::mlp_in)], terms(Role::mlp_in)));
  detail::capture_input(cap, block, Role::mlp_out, hidden);
  return ad::add(h, apply_linear(hidden, L[int(Role::mlp_out)], terms(Role::mlp_out)));
}

template <class T>
Var<T> transformer_block(const BoundModel<T>& m, std::size_t block, Var<T> h,
                         const Injection<T>* inj, ForwardCapture<T>* cap = nullptr) {
  return mlp_stage(m, block, attention_stage(m, block, h, inj, cap), inj, cap);
}

/// Sinusoidal features of the diffusion timestep, length d.
template <class T>
Tensor<T> timestep_features(int t, int d) {
  Tensor<T> out({1, std::size_t(d)});
  const int half = d / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
    out[std::size_t(i)] = T(std::sin(double(t) * freq));
    out[std::size_t(i + half)] = T(std::cos(double(t) * freq));
  }
  return out;
}

template <class T>
Var<T> time_embedding(const BoundModel<T>& m, int t) {
  const auto& cfg = *m.config;
  if (t < 0 || t >= cfg.diffusion_steps)
    throw RangeError("timestep " + std::to_string(t) + " outside [0, " +
                     std::to_string(cfg.diffusion_steps) + ")");
  auto& tape = *m.pos_embed.tape;
  return apply_linear(tape.constant(timestep_features<T>(t, cfg.channels)), m.time_proj,
                      static_cast<const std::vector<LoraTerm<T>>*>(nullptr));
}

/// Condition token plus embedded patches plus positions: the n x d sequence H.
template <class T>
Var<T> embed_tokens(const BoundModel<T>& m, const Tensor<T>& noisy_tokens,
                    const Tensor<T>& cond_frame) {
  const auto& cfg = *m.config;
  auto& tape = *m.pos_embed.tape;
  const auto n = std::size_t(cfg.tokens());
  const auto F = std::size_t(cfg.frame_size);
  if (noisy_tokens.shape() != Shape{n, std::size_t(cfg.patch_dim())})
    throw ConfigError("noisy tokens " + shape_str(noisy_tokens.shape()) + " do not match config");
  if (cond_frame.size() != F * F)
    throw ConfigError("condition frame " + shape_str(cond_frame.shape()) + " does not match config");
  auto patches = ad::slice_rows(tape.constant(noisy_tokens), 1, n);
  auto cond = tape.constant(cond_frame.reshaped({1, F * F}));
  using Terms = const std::vector<LoraTerm<T>>*;
  auto seq = ad::concat_rows<T>({apply_linear(cond, m.cond_embed, Terms{}),
                                 apply_linear(patches, m.patch_embed, Terms{})});
  return ad::add(seq, m.pos_embed);
}

/// Noise prediction for the n - 1 patch rows from the final shared stream.
template <class T>
Var<T> output_head(const BoundModel<T>& m, Var<T> shared) {
  const auto n = std::size_t(m.config->tokens());
  auto rows = ad::slice_rows(shared, 1, n);
  return apply_linear(ad::layer_norm_rows(rows), m.head,
                      static_cast<const std::vector<LoraTerm<T>>*>(nullptr));
}

/// Single-stream forward: [H; E_1; ...] through every block, epsilon for the
/// patch rows. With no injection and no tokens this is the base model.
template <class T>
Var<T> forward(const BoundModel<T>& m, const Tensor<T>& noisy_tokens, const Tensor<T>& cond_frame,
               int timestep, std::type_identity_t<const Injection<T>*> inj = nullptr,
               std::span<const Var<T>> scaling_tokens = {},
               std::type_identity_t<ForwardCapture<T>*> cap = nullptr) {
  auto temb = time_embedding(m, timestep);
  auto h = embed_tokens(m, noisy_tokens, cond_frame);
  if (!scaling_tokens.empty()) {
    std::vector<Var<T>> parts{h};
    for (const auto& e : scaling_tokens) {
      if (e.shape() != Shape{1, std::size_t(m.config->channels)})
        throw DimensionError("scaling token " + shape_str(e.shape()) + " does not match channels");
      parts.push_back(e);
    }
    h = ad::concat_rows(parts);
  }
  h = ad::add_bias(h, temb);
  for (std::size_t b = 0; b < m.blocks.size(); ++b) h = transformer_block(m, b, h, inj, cap);
  return output_head(m, h);
}

// ---------------------------------------------------------------------------
// Tensor-level branch description, used by samplers and diagnostics

template <class T>
struct LoraWeights {
  const Tensor<T>* a;
  const Tensor<T>* b;
  T coef;
};

/// What one adapter branch contributes: low-rank terms per (block, role) and
/// an optional scaling token.
template <class T>
struct BranchSpec {
  std::vector<std::array<std::vector<LoraWeights<T>>, kNumRoles>> terms;
  std::optional<Tensor<T>> token;
};

template <class T>
Injection<T> bind_injection(Tape<T>& tape, const BranchSpec<T>& spec) {
  Injection<T> inj;
  inj.blocks.resize(spec.terms.size());
  for (std::size_t b = 0; b < spec.terms.size(); ++b)
    for (int r = 0; r < kNumRoles; ++r)
      for (const auto& w : spec.terms[b][std::size_t(r)])
        inj.blocks[b][std::size_t(r)].push_back(
            LoraTerm<T>{tape.constant(*w.a), tape.constant(*w.b), w.coef});
  return inj;
}

/// Epsilon prediction for [V x F x F] noisy frames in latent units.
template <class T>
Tensor<T> predict_noise(const ToyDiT<T>& model, const Tensor<T>& noisy_frames,
                        const Tensor<T>& cond_latent, int timestep,
                        std::type_identity_t<const BranchSpec<T>*> spec = nullptr) {
  Tape<T> tape;
  auto bm = bind_model(tape, model);
  std::vector<Var<T>> tokens;
  Injection<T> inj;
  if (spec) {
    inj = bind_injection(tape, *spec);
    if (spec->token) tokens.push_back(tape.constant(*spec->token));
  }
  auto eps = forward(bm, patchify(noisy_frames, model.config), cond_latent, timestep,
                     spec ? &inj : nullptr, std::span<const Var<T>>(tokens));
  return unpatchify(eps.value(), model.config);
}

}  // namespace lion
