// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0
//
// Weight-space fusion of k adapters. Vanilla fusion sums lambda_i * dW_i per
// attachment point. Norm-consistent fusion first rescales every dW_i to a
// shared per-point norm alpha (the mean of the k Frobenius norms unless
// overridden), so no adapter dominates a layer just because it trained to a
// larger delta.

#pragma once

#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "lion/adapter.hpp"

namespace lion {

class FusionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An adapter has a zero delta at some point, so it cannot be normalised.
class DegenerateAdapterError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

enum class FusionMode { vanilla, norm_consistent };

inline const char* fusion_mode_name(FusionMode m) {
  return m == FusionMode::vanilla ? "vanilla" : "norm_consistent";
}

inline FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "vanilla") return FusionMode::vanilla;
  if (s == "norm_consistent") return FusionMode::norm_consistent;
  throw ConfigError("unknown fusion mode '" + s + "' (expected vanilla or norm_consistent)");
}

template <class T>
struct FusionPlan {
  std::vector<const AdapterSet<T>*> adapters;
  std::vector<T> lambdas;  // empty means all ones
  FusionMode mode = FusionMode::norm_consistent;
  std::optional<T> alpha_override;

  std::size_t size() const { return adapters.size(); }
  T lambda(std::size_t i) const { return lambdas.empty() ? T(1) : lambdas.at(i); }

  /// k >= 1, one lambda per adapter, identical attachment ids everywhere.
  void validate() const {
    if (adapters.empty()) throw FusionError("fusion plan has no adapters");
    if (!lambdas.empty() && lambdas.size() != adapters.size())
      throw FusionError(std::to_string(lambdas.size()) + " lambdas for " +
                        std::to_string(adapters.size()) + " adapters");
    const auto ref = adapters.front()->ids();
    for (std::size_t i = 1; i < adapters.size(); ++i) {
      const auto ids = adapters[i]->ids();
      if (ids == ref) continue;
      std::string only_ref, only_other;
      for (const auto& id : ref)
        if (!adapters[i]->points.count(id)) only_ref += " " + id;
      for (const auto& id : ids)
        if (!adapters.front()->points.count(id)) only_other += " " + id;
      throw FusionError("attachment ids differ between '" + adapters.front()->name + "' and '" +
                        adapters[i]->name + "': only in first [" + only_ref + " ], only in second [" +
                        only_other + " ]");
    }
  }
};

template <class T>
using DeltaMap = std::map<std::string, Tensor<T>>;

/// Per point: sum_i lambda_i * dW_i.
template <class T>
DeltaMap<T> vanilla_fuse(const FusionPlan<T>& plan) {
  if (plan.mode != FusionMode::vanilla) throw FusionError("vanilla_fuse needs mode vanilla");
  plan.validate();
  DeltaMap<T> out;
  for (const auto& id : plan.adapters.front()->ids()) {
    Tensor<T> acc;
    for (std::size_t i = 0; i < plan.size(); ++i) {
      const Tensor<T> d = delta_weight(plan.adapters[i]->at(id));
      if (acc.empty()) acc = Tensor<T>(d.shape());
      for (std::size_t j = 0; j < d.size(); ++j) acc[j] += plan.lambda(i) * d[j];
    }
    out.emplace(id, std::move(acc));
  }
  return out;
}

/// Mean of the norms, or the override. Every norm must be positive.
template <class T>
T compute_alpha(std::span<const T> norms, std::optional<T> alpha_override = std::nullopt) {
  if (norms.empty()) throw FusionError("compute_alpha of no norms");
  T sum = 0;
  for (T n : norms) {
    if (!(n > T(0))) throw DegenerateAdapterError("adapter delta with zero norm");
    sum += n;
  }
  return alpha_override ? *alpha_override : sum / T(norms.size());
}

struct NormEntry {
  std::string attachment_id;
  std::string adapter_name;
  double norm_before;
  double alpha;
  double scale_factor;
  double norm_after;
};

struct NormReport {
  std::vector<NormEntry> entries;

  void write_csv(std::ostream& os) const {
    os << "attachment_id,adapter_name,norm_before,alpha,scale_factor,norm_after\n";
    os.precision(17);
    for (const auto& e : entries)
      os << e.attachment_id << ',' << e.adapter_name << ',' << e.norm_before << ',' << e.alpha
         << ',' << e.scale_factor << ',' << e.norm_after << '\n';
  }
};

/// scale[i][id] = alpha(id) / ||dW_i(id)||, plus the report describing it.
template <class T>
std::pair<std::vector<std::map<std::string, T>>, NormReport> norm_scale_factors(
    const FusionPlan<T>& plan) {
  plan.validate();
  std::vector<std::map<std::string, T>> scales(plan.size());
  NormReport report;
  for (const auto& id : plan.adapters.front()->ids()) {
    std::vector<Tensor<T>> deltas;
    std::vector<T> norms;
    for (std::size_t i = 0; i < plan.size(); ++i) {
      deltas.push_back(delta_weight(plan.adapters[i]->at(id)));
      norms.push_back(frobenius_norm(deltas.back()));
      if (!(norms.back() > T(0)))
        throw DegenerateAdapterError("adapter '" + plan.adapters[i]->name +
                                     "' has a zero delta at " + id);
    }
    const T alpha = compute_alpha<T>(norms, plan.alpha_override);
    for (std::size_t i = 0; i < plan.size(); ++i) {
      const T factor = alpha / norms[i];
      scales[i][id] = factor;
      report.entries.push_back({id, plan.adapters[i]->name, double(norms[i]), double(alpha),
                                double(factor), double(frobenius_norm(factor * deltas[i]))});
    }
  }
  return {std::move(scales), std::move(report)};
}

/// Per point: sum_i lambda_i * (alpha / ||dW_i||) dW_i.
template <class T>
std::pair<DeltaMap<T>, NormReport> norm_consistent_fuse(const FusionPlan<T>& plan) {
  if (plan.mode != FusionMode::norm_consistent)
    throw FusionError("norm_consistent_fuse needs mode norm_consistent");
  auto [scales, report] = norm_scale_factors(plan);
  DeltaMap<T> out;
  for (const auto& id : plan.adapters.front()->ids()) {
    Tensor<T> acc;
    for (std::size_t i = 0; i < plan.size(); ++i) {
      const Tensor<T> d = delta_weight(plan.adapters[i]->at(id));
      const T factor = scales[i].at(id);
      if (acc.empty()) acc = Tensor<T>(d.shape());
      for (std::size_t j = 0; j < d.size(); ++j) acc[j] += plan.lambda(i) * (factor * d[j]);
    }
    out.emplace(id, std::move(acc));
  }
  return {std::move(out), std::move(report)};
}

/// Dispatches on plan.mode; the report is empty for vanilla fusion.
template <class T>
std::pair<DeltaMap<T>, NormReport> fuse(const FusionPlan<T>& plan) {
  if (plan.mode == FusionMode::vanilla) return {vanilla_fuse(plan), NormReport{}};
  return norm_consistent_fuse(plan);
}

}  // namespace lion
