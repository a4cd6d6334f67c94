// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adapters: per attachment point a pair (A: d_in x r, B: r x d_out)
// with delta A B, injected as W_base + lambda * A B. Only weights are adapted;
// biases stay at their base values.

#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "lion/common.hpp"
#include "lion/toy_dit.hpp"
#include "lion/weight_file.hpp"

namespace lion {

template <class T>
struct LoraAdapter {
  Tensor<T> a;  // d_in x r
  Tensor<T> b;  // r x d_out

  std::size_t rank() const { return a.shape().at(1); }
};

template <class T>
struct AdapterSet {
  std::string name;
  int rank = 8;
  T lambda = T(1);
  nlohmann::json provenance = nlohmann::json::object();
  std::map<std::string, LoraAdapter<T>> points;

  const LoraAdapter<T>& at(const std::string& id) const {
    auto it = points.find(id);
    if (it == points.end())
      throw AttachmentError("adapter '" + name + "' has no attachment point '" + id + "'");
    return it->second;
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& [id, _] : points) out.push_back(id);
    return out;
  }
};

/// Gaussian A (std 0.02) and zero B, so a fresh adapter is a no-op.
template <class T>
AdapterSet<T> init_adapter(const ModelConfig& cfg, int rank, std::uint64_t seed,
                           std::string name = "adapter") {
  cfg.validate();
  if (rank < 1) throw ConfigError("adapter rank must be at least 1");
  AdapterSet<T> set;
  set.name = std::move(name);
  set.rank = rank;
  Rng rng(derive_seed(seed, "adapter.init"));
  for (int blk = 0; blk < cfg.num_blocks; ++blk)
    for (Role r : kRoles) {
      const auto [din, dout] = attachment_dims(cfg, r);
      if (std::size_t(rank) > std::min(din, dout))
        throw ConfigError("adapter rank " + std::to_string(rank) + " exceeds min(" +
                          std::to_string(din) + ", " + std::to_string(dout) + ") at " +
                          attachment_id(blk, r));
      set.points[attachment_id(blk, r)] =
          LoraAdapter<T>{normal_tensor<T>({din, std::size_t(rank)}, 0.02, rng),
                         Tensor<T>({std::size_t(rank), dout})};
    }
  return set;
}

template <class T>
Tensor<T> delta_weight(const LoraAdapter<T>& adapter) {
  return matmul(adapter.a, adapter.b);
}

/// W_base + lambda * A B.
template <class T>
Tensor<T> effective_weight(const Tensor<T>& base, const LoraAdapter<T>& adapter, T lambda) {
  if (base.rank() != 2 || adapter.a.shape().at(0) != base.shape()[0] ||
      adapter.b.shape().at(1) != base.shape()[1])
    throw AttachmentError("adapter " + shape_str(adapter.a.shape()) + " x " +
                          shape_str(adapter.b.shape()) + " does not fit weight " +
                          shape_str(base.shape()));
  Tensor<T> out = base;
  if (lambda == T(0)) return out;
  const Tensor<T> delta = delta_weight(adapter);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += lambda * delta[i];
  return out;
}

/// Throws AttachmentError naming every missing, unknown or misshapen point.
template <class T>
void validate_adapter(const AdapterSet<T>& set, const ModelConfig& cfg) {
  std::vector<std::string> missing, unknown, misshapen;
  for (const auto& id : attachment_ids(cfg))
    if (!set.points.count(id)) missing.push_back(id);
  for (const auto& [id, ad] : set.points) {
    const auto where = parse_attachment_id(cfg, id);
    if (!where) {
      unknown.push_back(id);
      continue;
    }
    const auto [din, dout] = attachment_dims(cfg, where->second);
    if (ad.a.rank() != 2 || ad.b.rank() != 2 || ad.a.shape()[0] != din ||
        ad.b.shape()[1] != dout || ad.a.shape()[1] != ad.b.shape()[0])
      misshapen.push_back(id);
  }
  if (missing.empty() && unknown.empty() && misshapen.empty()) return;
  auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
    return s;
  };
  std::string msg = "adapter '" + set.name + "' does not match the model:";
  if (!missing.empty()) msg += " missing ids [" + join(missing) + "]";
  if (!unknown.empty()) msg += " unknown ids [" + join(unknown) + "]";
  if (!misshapen.empty()) msg += " misshapen ids [" + join(misshapen) + "]";
  throw AttachmentError(msg);
}

/// Branch description with coefficient coef * point_scale(id) at every point.
template <class T, class ScaleFn>
BranchSpec<T> branch_spec(const AdapterSet<T>& set, const ModelConfig& cfg, T coef,
                          ScaleFn&& point_scale) {
  BranchSpec<T> spec;
  spec.terms.resize(std::size_t(cfg.num_blocks));
  for (const auto& [id, ad] : set.points) {
    const auto where = parse_attachment_id(cfg, id);
    if (!where) throw AttachmentError("unknown attachment point '" + id + "'");
    spec.terms[std::size_t(where->first)][std::size_t(where->second)].push_back(
        LoraWeights<T>{&ad.a, &ad.b, T(coef * point_scale(id))});
  }
  return spec;
}

template <class T>
BranchSpec<T> branch_spec(const AdapterSet<T>& set, const ModelConfig& cfg, T coef) {
  return branch_spec(set, cfg, coef, [](const std::string&) { return T(1); });
}

template <class T>
Section adapter_section(const AdapterSet<T>& set) {
  Section s{"adapter/" + set.name,
            {{"name", set.name}, {"rank", set.rank}, {"lambda", double(set.lambda)},
             {"provenance", set.provenance}},
            {}};
  for (const auto& [id, ad] : set.points) {
    s.add(id + ".A", ad.a);
    s.add(id + ".B", ad.b);
  }
  return s;
}

template <class T>
AdapterSet<T> adapter_from_section(const Section& s) {
  AdapterSet<T> set;
  try {
    set.name = s.meta.at("name").get<std::string>();
    set.rank = s.meta.at("rank").get<int>();
    set.lambda = T(s.meta.at("lambda").get<double>());
    set.provenance = s.meta.value("provenance", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseErrorKind::malformed_header, std::string("adapter meta: ") + e.what());
  }
  for (const auto& nt : s.tensors) {
    const auto dot = nt.name.rfind('.');
    if (dot == std::string::npos)
      throw ParseError(ParseErrorKind::malformed_header, "adapter tensor name " + nt.name);
    const auto id = nt.name.substr(0, dot);
    const auto part = nt.name.substr(dot + 1);
    if (part != "A" && part != "B")
      throw ParseError(ParseErrorKind::malformed_header, "adapter tensor name " + nt.name);
    auto& pt = set.points[id];
    (part == "A" ? pt.a : pt.b) = s.get<T>(nt.name);
  }
  for (const auto& [id, pt] : set.points)
    if (pt.a.empty() || pt.b.empty())
      throw ParseError(ParseErrorKind::malformed_header, "attachment " + id + " lacks A or B");
  return set;
}

template <class T>
void save_adapters(const AdapterSet<T>& set, const std::filesystem::path& path) {
  WeightFile wf;
  wf.sections.push_back(adapter_section(set));
  write_weight_file(path, wf);
}

/// First adapter section of the file, validated against cfg before returning.
template <class T>
AdapterSet<T> load_adapters(const std::filesystem::path& path, const ModelConfig& cfg) {
  const WeightFile wf = read_weight_file(path);
  const auto sections = wf.with_prefix("adapter/");
  if (sections.empty())
    throw ParseError(ParseErrorKind::malformed_header, path.string() + " holds no adapter section");
  AdapterSet<T> set = adapter_from_section<T>(*sections.front());
  validate_adapter(set, cfg);
  return set;
}

}  // namespace lion
