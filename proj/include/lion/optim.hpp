// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0
//
// Adam with optional global-norm gradient clipping.

#pragma once

#include <cmath>
#include <vector>

#include "lion/tensor.hpp"

namespace lion {

template <class T>
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0;  // 0 disables clipping
  };

  Adam(std::vector<Tensor<T>*> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (auto* p : params_) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }

  /// One update from gradients aligned with the parameter list. Returns the
  /// gradient norm before clipping.
  double step(const std::vector<Tensor<T>>& grads) {
    if (grads.size() != params_.size()) throw DimensionError("Adam: gradient count mismatch");
    long double sq = 0;
    for (const auto& g : grads)
      for (T v : g.data()) sq += static_cast<long double>(v) * v;
    const double norm = std::sqrt(double(sq));
    const double clip = opt_.clip_norm > 0 && norm > opt_.clip_norm ? opt_.clip_norm / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      if (grads[i].shape() != p.shape()) throw DimensionError("Adam: gradient shape mismatch");
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double g = double(grads[i][j]) * clip;
        const double m = opt_.beta1 * double(m_[i][j]) + (1 - opt_.beta1) * g;
        const double v = opt_.beta2 * double(v_[i][j]) + (1 - opt_.beta2) * g * g;
        m_[i][j] = T(m);
        v_[i][j] = T(v);
        p[j] = T(double(p[j]) - opt_.lr * (m / c1) / (std::sqrt(v / c2) + opt_.eps));
      }
    }
    return norm;
  }

  long steps_taken() const { return t_; }
  void set_lr(double lr) { opt_.lr = lr; }

 private:
  std::vector<Tensor<T>*> params_;
  Options opt_;
  std::vector<Tensor<T>> m_, v_;
  long t_ = 0;
};

}  // namespace lion
