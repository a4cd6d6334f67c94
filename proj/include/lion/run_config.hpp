// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0
//
// Versioned JSON run configuration shared by the command-line tool. Every
// section is optional; missing keys keep their defaults and unknown keys are
// rejected with the offending path in the message.

#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lion/synthbench.hpp"

namespace lion {

inline constexpr int kRunConfigVersion = 1;

struct DataConfig {
  int scenes = 100;
  int clip_length = 120;
  int points = 3;
  double sigma_px = 1.5;
  std::uint64_t seed = 0;
};

struct FusionConfig {
  FusionMode mode = FusionMode::norm_consistent;
  AveragingScope scope = AveragingScope::full_block;
  std::optional<double> alpha;
};

struct EvalConfig {
  int ddim_steps = 50;
  std::vector<double> s_grid = {0.2, 0.4, 0.6, 0.8, 1.0};
  int conditions = 8;
  int probes = 32;
  std::uint64_t seed = 0;
};

struct RunConfig {
  int schema_version = kRunConfigVersion;
  ModelConfig model;
  TrainConfig train;
  PretrainConfig pretrain;
  DataConfig data;
  FusionConfig fusion;
  EvalConfig eval;

  ClipSampler sampler() const { return {data.clip_length, model.frames}; }
  RenderOptions render() const { return {model.frame_size, data.sigma_px}; }

  void validate() const {
    model.validate();
    train.validate();
    sampler().validate();
    if (data.scenes < 1) throw ConfigError("data.scenes must be positive");
    if (data.points < 1) throw ConfigError("data.points must be positive");
    if (!(data.sigma_px > 0)) throw ConfigError("data.sigma_px must be positive");
    if (pretrain.steps < 0 || pretrain.batch < 1 || !(pretrain.lr > 0))
      throw ConfigError("pretrain settings must be positive");
    if (eval.ddim_steps < 1) throw ConfigError("eval.ddim_steps must be positive");
    if (eval.conditions < 1) throw ConfigError("eval.conditions must be positive");
    if (eval.probes < 1) throw ConfigError("eval.probes must be positive");
    if (fusion.alpha && !(*fusion.alpha > 0)) throw ConfigError("fusion.alpha must be positive");
  }
};

inline const char* scope_name(AveragingScope s) {
  return s == AveragingScope::full_block ? "full_block" : "attention_only";
}

inline AveragingScope parse_scope(const std::string& s) {
  if (s == "full_block") return AveragingScope::full_block;
  if (s == "attention_only") return AveragingScope::attention_only;
  throw ConfigError("unknown averaging scope '" + s + "' (expected full_block or attention_only)");
}

namespace detail {

using Setter = std::function<void(const nlohmann::json&)>;

inline void apply_section(const nlohmann::json& j, const std::string& section,
                          const std::map<std::string, Setter>& setters) {
  if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + section + "." + key + "'");
    try {
      it->second(value);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(section + "." + key + " has the wrong type");
    }
  }
}

template <class T>
Setter set(T& slot) {
  return [&slot](const nlohmann::json& v) {
    if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("expected an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("expected a number");
    }
    slot = v.get<T>();
  };
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  using detail::set;
  for (const auto& [key, value] : j.items()) {
    if (key == "schema_version") {
      if (!value.is_number_integer() || value.get<int>() != kRunConfigVersion)
        throw ConfigError("unsupported schema_version " + value.dump() + " (expected " +
                          std::to_string(kRunConfigVersion) + ")");
    } else if (key == "model") {
      from_json(value, c.model);
    } else if (key == "train") {
      detail::apply_section(value, "train",
                            {{"steps", set(c.train.steps)},
                             {"lr", set(c.train.lr)},
                             {"batch", set(c.train.batch)},
                             {"rank", set(c.train.rank)},
                             {"seed", set(c.train.seed)},
                             {"arm", [&](const nlohmann::json& v) { c.train.arm = parse_arm(v.get<std::string>()); }},
                             {"num_freqs", set(c.train.num_freqs)},
                             {"clip_norm", set(c.train.clip_norm)},
                             {"pretrain_steps", set(c.pretrain.steps)},
                             {"pretrain_lr", set(c.pretrain.lr)},
                             {"pretrain_batch", set(c.pretrain.batch)},
                             {"pretrain_warmup", set(c.pretrain.warmup)}});
    } else if (key == "data") {
      detail::apply_section(value, "data",
                            {{"scenes", set(c.data.scenes)},
                             {"clip_length", set(c.data.clip_length)},
                             {"points", set(c.data.points)},
                             {"sigma_px", set(c.data.sigma_px)},
                             {"seed", set(c.data.seed)}});
    } else if (key == "fusion") {
      detail::apply_section(
          value, "fusion",
          {{"mode", [&](const nlohmann::json& v) { c.fusion.mode = parse_fusion_mode(v.get<std::string>()); }},
           {"scope", [&](const nlohmann::json& v) { c.fusion.scope = parse_scope(v.get<std::string>()); }},
           {"alpha", [&](const nlohmann::json& v) {
              if (v.is_null()) c.fusion.alpha.reset();
              else if (v.is_number()) c.fusion.alpha = v.get<double>();
              else throw ConfigError("fusion.alpha must be a number or null");
            }}});
    } else if (key == "eval") {
      detail::apply_section(value, "eval",
                            {{"ddim_steps", set(c.eval.ddim_steps)},
                             {"s_grid", set(c.eval.s_grid)},
                             {"conditions", set(c.eval.conditions)},
                             {"probes", set(c.eval.probes)},
                             {"seed", set(c.eval.seed)}});
    } else {
      throw ConfigError("unknown config section '" + key + "'");
    }
  }
  c.pretrain.seed = c.train.seed;
  c.validate();
  return c;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json alpha = c.fusion.alpha ? nlohmann::json(*c.fusion.alpha) : nlohmann::json(nullptr);
  return {{"schema_version", c.schema_version},
          {"model", c.model},
          {"train",
           {{"steps", c.train.steps},
            {"lr", c.train.lr},
            {"batch", c.train.batch},
            {"rank", c.train.rank},
            {"seed", c.train.seed},
            {"arm", arm_name(c.train.arm)},
            {"num_freqs", c.train.num_freqs},
            {"clip_norm", c.train.clip_norm},
            {"pretrain_steps", c.pretrain.steps},
            {"pretrain_lr", c.pretrain.lr},
            {"pretrain_batch", c.pretrain.batch},
            {"pretrain_warmup", c.pretrain.warmup}}},
          {"data",
           {{"scenes", c.data.scenes},
            {"clip_length", c.data.clip_length},
            {"points", c.data.points},
            {"sigma_px", c.data.sigma_px},
            {"seed", c.data.seed}}},
          {"fusion", {{"mode", fusion_mode_name(c.fusion.mode)}, {"scope", scope_name(c.fusion.scope)}, {"alpha", alpha}}},
          {"eval",
           {{"ddim_steps", c.eval.ddim_steps},
            {"s_grid", c.eval.s_grid},
            {"conditions", c.eval.conditions},
            {"probes", c.eval.probes},
            {"seed", c.eval.seed}}}};
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace lion
