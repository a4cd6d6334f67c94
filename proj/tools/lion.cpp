// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0
//
// lion: data generation, training, fusion, diagnostics and evaluation for the
// toy scaling-token LoRA stack.
//
// Exit codes: 0 success, 2 configuration, 3 I/O or parse, 4 training failure,
// 5 evaluation domain error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lion/run_config.hpp"

namespace fs = std::filesystem;
using namespace lion;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;

  RunConfig load() const {
    RunConfig c = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (seed) {
      c.data.seed = *seed;
      c.train.seed = *seed;
      c.pretrain.seed = *seed;
      c.eval.seed = *seed;
    }
    return c;
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "RunConfig JSON file");
  cmd->add_option("--seed", c.seed, "Seed for every random component of the command");
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void write_losses(const fs::path& path, const std::vector<double>& losses) {
  auto out = open_out(path);
  out << "step,loss\n" << std::setprecision(12);
  for (std::size_t i = 0; i < losses.size(); ++i) out << i << ',' << losses[i] << '\n';
}

std::vector<FrameSequence> load_data(const std::string& dir, nlohmann::json* manifest = nullptr) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory " + dir + " does not exist");
  return read_dataset(dir, manifest);
}

/// "a:b:n" is n evenly spaced values from a to b; otherwise a comma list.
std::vector<double> parse_grid(const std::string& text) {
  try {
    if (std::count(text.begin(), text.end(), ':') == 2) {
      const auto p1 = text.find(':'), p2 = text.find(':', p1 + 1);
      const double a = std::stod(text.substr(0, p1)), b = std::stod(text.substr(p1 + 1, p2 - p1 - 1));
      const int n = std::stoi(text.substr(p2 + 1));
      if (n < 2) throw ConfigError("grid needs at least two points");
      std::vector<double> out;
      for (int i = 0; i < n; ++i) out.push_back(std::round((a + (b - a) * i / (n - 1)) * 1e12) / 1e12);
      return out;
    }
    std::vector<double> out;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stod(item));
    return out;
  } catch (const std::logic_error&) {
    throw ConfigError("cannot parse grid '" + text + "'");
  }
}

/// Admissible S range of an adapter: its embedder, else its training provenance.
ClipSampler adapter_sampler(const TrainedAdapter& t, const ClipSampler& fallback) {
  if (t.embedder) return t.embedder->sampler;
  const auto& p = t.adapter.provenance;
  if (p.contains("clip_length") && p.contains("frames"))
    return {p["clip_length"].get<int>(), p["frames"].get<int>()};
  return fallback;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& common, const std::string& primitive, std::optional<int> scenes,
                 std::optional<int> clip_len, const std::string& out) {
  auto cfg = common.load();
  if (scenes) cfg.data.scenes = *scenes;
  if (clip_len) cfg.data.clip_length = *clip_len;
  const auto kind = parse_primitive(primitive);
  const auto ds = make_dataset(kind, cfg.data.scenes, cfg.data.clip_length, cfg.data.seed, cfg.render(),
                               cfg.data.points);
  const auto manifest = write_dataset(ds, out, cfg.data.seed);
  std::cout << "wrote " << manifest["clips"].size() << " clips of " << primitive << " to " << out << '\n';
  return 0;
}

int cmd_pretrain(const Common& common, const std::string& data, std::optional<int> steps, const std::string& out) {
  auto cfg = common.load();
  if (steps) cfg.pretrain.steps = *steps;
  cfg.validate();
  const auto clips = load_data(data);
  fs::create_directories(out);
  const auto res = pretrain_base(cfg.model, clips, cfg.sampler(), cfg.pretrain);
  save_base(res.model, fs::path(out) / "base.lw");
  write_losses(fs::path(out) / "loss_curve.csv", res.losses);
  const auto [first, last] = loss_endpoints(res.losses);
  std::cout << "pretrained " << res.losses.size() << " steps, loss " << first << " -> " << last << '\n';
  return 0;
}

int cmd_train(const Common& common, const std::string& data, const std::string& base_path,
              const std::string& primitive, const std::string& arm, std::optional<int> steps,
              const std::string& out) {
  auto cfg = common.load();
  if (steps) cfg.train.steps = *steps;
  if (!arm.empty()) cfg.train.arm = parse_arm(arm);
  cfg.validate();
  nlohmann::json manifest;
  const auto clips = load_data(data, &manifest);
  const std::string stored = manifest.value("primitive", "");
  const std::string name = primitive.empty() ? stored : primitive_name(parse_primitive(primitive));
  if (!stored.empty() && name != stored)
    throw ConfigError("dataset holds " + stored + " clips, not " + name);
  const auto base = load_base(base_path);
  const ClipSampler sampler{manifest.value("clip_length", cfg.data.clip_length), base.config.frames};
  auto res = train_lora(base, clips, sampler, cfg.train, name);
  fs::create_directories(out);
  save_trained({std::move(res.adapter), std::move(res.embedder)}, fs::path(out) / "adapter.lw");
  write_losses(fs::path(out) / "loss_curve.csv", res.losses);
  const auto [first, last] = loss_endpoints(res.losses);
  std::cout << "trained " << name << " (" << arm_name(cfg.train.arm) << "), loss " << first << " -> " << last
            << '\n';
  return 0;
}

int cmd_fuse(const Common& common, const std::string& base_path, const std::vector<std::string>& adapter_paths,
             const std::string& mode, const std::string& scope, std::vector<double> scales,
             const std::string& out) {
  auto cfg = common.load();
  if (!mode.empty()) cfg.fusion.mode = parse_fusion_mode(mode);
  if (!scope.empty()) cfg.fusion.scope = parse_scope(scope);
  cfg.validate();
  if (scales.empty()) scales.assign(adapter_paths.size(), 1.0);
  if (scales.size() != adapter_paths.size())
    throw ConfigError(std::to_string(scales.size()) + " scales for " + std::to_string(adapter_paths.size()) +
                      " adapters");
  const auto base = load_base(base_path);
  std::vector<TrainedAdapter> trained;
  for (const auto& p : adapter_paths) trained.push_back(load_trained(p, base.config));
  for (std::size_t i = 0; i < trained.size(); ++i)
    adapter_sampler(trained[i], cfg.sampler()).check_scale(scales[i]);

  FusionPlan<float> plan;
  for (const auto& t : trained) plan.adapters.push_back(&t.adapter);
  plan.mode = cfg.fusion.mode;
  if (cfg.fusion.alpha) plan.alpha_override = float(*cfg.fusion.alpha);
  plan.validate();

  const auto cond = condition_frames(1, cfg.eval.seed, {base.config.frame_size, cfg.data.sigma_px},
                                     cfg.data.points)[0];
  const auto noise_seed = derive_seed(cfg.eval.seed, "eval.noise", 0);
  Tensor<float> frames;
  if (trained.size() == 1) {
    const auto spec = amplitude_branch(base.config, trained[0].adapter, trained[0].embedder_ptr(),
                                       trained[0].arm(), scales[0]);
    frames = ddim_sample(base, cond, cfg.eval.ddim_steps, &spec, noise_seed);
  } else {
    FusedContext<float> ctx;
    ctx.plan = plan;
    ctx.scope = cfg.fusion.scope;
    for (std::size_t i = 0; i < trained.size(); ++i) {
      if (!trained[i].embedder)
        throw FusionError("adapter " + adapter_paths[i] + " has no scaling embedder; fusion needs one per adapter");
      ctx.tokens.push_back(make_scaling_token(*trained[i].embedder, scales[i]).embedding);
    }
    frames = fused_ddim_sample(base, cond, cfg.eval.ddim_steps, ctx, noise_seed);
  }

  fs::create_directories(out);
  WeightFile wf;
  nlohmann::json meta = {{"mode", fusion_mode_name(plan.mode)}, {"scales", scales}, {"seed", cfg.eval.seed}};
  wf.add_section("clip", meta).add("frames", frames);
  write_weight_file(fs::path(out) / "frames.lw", wf);
  {
    auto os = open_out(fs::path(out) / "norm_report.csv");
    if (plan.mode == FusionMode::norm_consistent) norm_scale_factors(plan).second.write_csv(os);
    else NormReport{}.write_csv(os);
  }
  const auto sample = measure_clip(frames, noise_seed);
  {
    auto os = open_out(fs::path(out) / "trajectory.csv");
    os << "label,S,condition,frame,x,y\n";
    try {
      std::string label = trained.size() == 1 ? arm_name(trained[0].arm()) : fusion_mode_name(plan.mode);
      write_trajectory_rows(os, label, scales[0], 0, centroid_trajectory(frames));
    } catch (const UndefinedStatisticError&) {
    }
  }
  std::cout << std::setprecision(6) << "direction_deg " << sample.direction_deg << " smoothness "
            << sample.smoothness << " magnitude " << sample.magnitude << '\n';
  return 0;
}

int cmd_diagnose(const Common& common, const std::string& base_path, const std::vector<std::string>& adapter_paths,
                 const std::string& probe_dir, const std::string& out, bool svg) {
  auto cfg = common.load();
  cfg.validate();
  const auto base = load_base(base_path);
  std::vector<TrainedAdapter> trained;
  for (const auto& p : adapter_paths) trained.push_back(load_trained(p, base.config));
  nlohmann::json manifest;
  const auto clips = load_data(probe_dir, &manifest);
  const ClipSampler sampler{manifest.value("clip_length", cfg.data.clip_length), base.config.frames};
  const auto probes = make_probes(base.config, clips, sampler, cfg.eval.probes, cfg.eval.seed);

  fs::create_directories(out);
  std::vector<Series> series;
  for (std::size_t i = 0; i < trained.size(); ++i)
    for (std::size_t j = i + 1; j < trained.size(); ++j) {
      const auto prof = layerwise_cosine(base, trained[i].adapter, trained[j].adapter, probes);
      const std::string tag = trained[i].adapter.name + "_" + trained[j].adapter.name;
      auto os = open_out(fs::path(out) / ("similarity_" + tag + ".csv"));
      prof.write_csv(os);
      const auto [lo, hi] = half_means(prof);
      std::cout << tag << ": mean |cos| first half " << lo << ", second half " << hi << '\n';
      Series s{tag, {}, {}};
      for (const auto& b : prof.blocks) {
        s.x.push_back(b.block);
        s.y.push_back(std::abs(b.mean));
      }
      series.push_back(std::move(s));
    }
  std::vector<const AdapterSet<float>*> sets;
  for (const auto& t : trained) sets.push_back(&t.adapter);
  {
    auto os = open_out(fs::path(out) / "norms.csv");
    norm_profile(base, sets, probes).write_csv(os);
  }
  if (svg && !series.empty()) {
    auto os = open_out(fs::path(out) / "similarity.svg");
    write_svg_chart(os, "|cosine| per block", series);
  }
  return 0;
}

int cmd_eval(const Common& common, const std::string& base_path, const std::vector<std::string>& adapter_paths,
             const std::string& grid, std::optional<int> conditions, const std::string& out) {
  auto cfg = common.load();
  if (!grid.empty()) cfg.eval.s_grid = parse_grid(grid);
  if (conditions) cfg.eval.conditions = *conditions;
  cfg.validate();
  const auto base = load_base(base_path);
  std::vector<TrainedAdapter> trained;
  for (const auto& p : adapter_paths) trained.push_back(load_trained(p, base.config));
  for (const auto& t : trained)
    for (double s : cfg.eval.s_grid) adapter_sampler(t, cfg.sampler()).check_scale(s);
  const auto conds = condition_frames(cfg.eval.conditions, cfg.eval.seed,
                                      {base.config.frame_size, cfg.data.sigma_px}, cfg.data.points);
  std::vector<LinearityReport> reports;
  for (const auto& t : trained)
    reports.push_back(eval_linearity(base, t.adapter, t.embedder_ptr(), t.arm(), cfg.eval.s_grid, conds,
                                     adapter_sampler(t, cfg.sampler()), {cfg.eval.ddim_steps, cfg.eval.seed}));
  fs::create_directories(out);
  {
    auto os = open_out(fs::path(out) / "linearity.csv");
    write_linearity_csv(os, reports);
  }
  {
    auto os = open_out(fs::path(out) / "trajectories.csv");
    os << "label,S,condition,frame,x,y\n";
    for (const auto& rep : reports)
      for (const auto& row : rep.rows)
        for (std::size_t c = 0; c < row.paths.size(); ++c) write_trajectory_rows(os, rep.arm, row.s, c, row.paths[c]);
  }
  for (const auto& rep : reports)
    std::cout << rep.arm << ": pearson_r " << rep.r << " (" << rep.excluded << " undefined samples)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scaling-token LoRA toolkit"};
  app.require_subcommand(1);

  Common common;
  std::string primitive, out, data, base, arm, mode, scope, probe, grid;
  std::optional<int> scenes, clip_len, steps, conditions;
  std::vector<std::string> adapters;
  std::vector<double> scales;
  bool svg = false;

  auto* gen = app.add_subcommand("gen-data", "Render a synthetic clip dataset");
  add_common(gen, common);
  gen->add_option("--primitive", primitive, "Motion primitive")->required();
  gen->add_option("--scenes", scenes, "Number of scenes");
  gen->add_option("--clip-len", clip_len, "Source frames per clip");
  gen->add_option("--out", out, "Output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "Train the base model on static clips");
  add_common(pre, common);
  pre->add_option("--data", data, "Dataset directory")->required();
  pre->add_option("--steps", steps, "Optimizer steps");
  pre->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train one motion adapter");
  add_common(train, common);
  train->add_option("--data", data, "Dataset directory")->required();
  train->add_option("--base", base, "Base model file")->required();
  train->add_option("--primitive", primitive, "Motion primitive (defaults to the dataset's)");
  train->add_option("--arm", arm, "scaling_token or adapter_scale");
  train->add_option("--steps", steps, "Optimizer steps");
  train->add_option("--out", out, "Output directory")->required();

  auto* fuse = app.add_subcommand("fuse", "Generate a clip with one or more adapters");
  add_common(fuse, common);
  fuse->add_option("--base", base, "Base model file")->required();
  fuse->add_option("--adapters", adapters, "Adapter files")->required();
  fuse->add_option("--mode", mode, "vanilla or norm_consistent");
  fuse->add_option("--scope", scope, "full_block or attention_only");
  fuse->add_option("--scales", scales, "Scaling value per adapter");
  fuse->add_option("--out", out, "Output directory")->required();

  auto* diag = app.add_subcommand("diagnose", "Layerwise similarity and norm profiles");
  add_common(diag, common);
  diag->add_option("--base", base, "Base model file")->required();
  diag->add_option("--adapters", adapters, "Adapter files")->required();
  diag->add_option("--probe", probe, "Dataset directory providing probe inputs")->required();
  diag->add_option("--out", out, "Output directory")->required();
  diag->add_flag("--svg", svg, "Also write similarity.svg");

  auto* ev = app.add_subcommand("eval", "Amplitude linearity report");
  add_common(ev, common);
  ev->add_option("--base", base, "Base model file")->required();
  ev->add_option("--adapter,--adapters", adapters, "Adapter files")->required();
  ev->add_option("--s-grid", grid, "a:b:n or comma-separated S values");
  ev->add_option("--conditions", conditions, "Number of condition frames");
  ev->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(common, primitive, scenes, clip_len, out);
    if (*pre) return cmd_pretrain(common, data, steps, out);
    if (*train) return cmd_train(common, data, base, primitive, arm, steps, out);
    if (*fuse) return cmd_fuse(common, base, adapters, mode, scope, scales, out);
    if (*diag) return cmd_diagnose(common, base, adapters, probe, out, svg);
    if (*ev) return cmd_eval(common, base, adapters, grid, conditions, out);
  } catch (const TrainingFailure& e) {
    std::cerr << "training failed: " << e.what() << '\n';
    return 4;
  } catch (const RangeError& e) {
    std::cerr << "out of range: " << e.what() << '\n';
    return 5;
  } catch (const UndefinedStatisticError& e) {
    std::cerr << "undefined statistic: " << e.what() << '\n';
    return 5;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 3;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 3;
  } catch (const DegenerateAdapterError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    // ConfigError, FusionError, AttachmentError, DimensionError
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
