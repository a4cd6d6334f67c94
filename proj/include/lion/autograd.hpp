// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over an eager tape. Every op appends a node
// holding its value and, when any input requires a gradient, a closure that
// pushes the output gradient back to its inputs. Nodes are appended in
// topological order, so backward is a single reverse sweep.

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lion/tensor.hpp"

namespace lion {

template <class T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Backward sweep was asked for something the tape cannot provide.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
  }
  Var<T> leaf(Tensor<T> value) {
    const bool rg = value.requires_grad();
    return push(std::move(value), rg, nullptr);
  }
  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  /// Appends an op result. The closure is dropped when no input needs a gradient.
  Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad,
                          requires_grad ? std::move(fn) : BackwardFn{}});
    return Var<T>{this, nodes_.size() - 1};
  }

  const Tensor<T>& value(Var<T> v) const { return node(v).value; }
  bool requires_grad(Var<T> v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward() loss w.r.t. v; zeros when unreachable.
  Tensor<T> grad(Var<T> v) const {
    const auto& n = node(v);
    return n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad;
  }

  template <class G>
  void accumulate(std::size_t id, G&& g) {
    auto& n = nodes_.at(id);
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = std::forward<G>(g);
      return;
    }
    auto dst = n.grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  void backward(Var<T> loss) {
    if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
    if (node(loss).value.size() != 1)
      throw ContractError("backward: loss must be a scalar, got shape " +
                          shape_str(node(loss).value.shape()));
    for (auto& n : nodes_) n.grad = Tensor<T>();
    if (!node(loss).requires_grad) return;
    nodes_[loss.id].grad = Tensor<T>(node(loss).value.shape(), T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      // The closure accumulates into earlier nodes only, so the gradient can be
      // lent to it and put back afterwards.
      Tensor<T> g = std::move(n.grad);
      n.backward(*this, g);
      n.grad = std::move(g);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad;
    BackwardFn backward;
  };

  const Node& node(Var<T> v) const {
    if (v.tape != this) throw ContractError("variable belongs to another tape");
    return nodes_.at(v.id);
  }

  std::vector<Node> nodes_;
};

namespace ad {

namespace detail {

template <class T>
Tape<T>& same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ContractError("operands live on different tapes");
  return *a.tape;
}

template <class T>
void require_same_shape(Var<T> a, Var<T> b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  Tensor<T> out = lion::matmul(a.value(), b.value());
  const auto m = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
  return tape.push(std::move(out), a.requires_grad() || b.requires_grad(),
                   [a, b, m, p, q](Tape<T>& t, const Tensor<T>& g) {
                     if (a.requires_grad()) {
                       Tensor<T> ga({m, p});
                       lion::detail::gemm(g.data().data(), m, q, false, b.value().data().data(),
                                          p, q, true, ga.data().data(), false);
                       t.accumulate(a.id, std::move(ga));
                     }
                     if (b.requires_grad()) {
                       Tensor<T> gb({p, q});
                       lion::detail::gemm(a.value().data().data(), m, p, true, g.data().data(),
                                          m, q, false, gb.data().data(), false);
                       t.accumulate(b.id, std::move(gb));
                     }
                   });
}

/// a * b^T, the attention-score product.
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  lion::detail::require_matrix(a.shape(), "matmul_nt");
  lion::detail::require_matrix(b.shape(), "matmul_nt");
  const auto m = a.shape()[0], p = a.shape()[1], q = b.shape()[0];
  if (b.shape()[1] != p)
    throw DimensionError("matmul_nt inner extents differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  Tensor<T> out({m, q});
  lion::detail::gemm(a.value().data().data(), m, p, false, b.value().data().data(), q, p, true,
                     out.data().data(), false);
  return tape.push(std::move(out), a.requires_grad() || b.requires_grad(),
                   [a, b, m, p, q](Tape<T>& t, const Tensor<T>& g) {
                     if (a.requires_grad()) {
                       Tensor<T> ga({m, p});
                       lion::detail::gemm(g.data().data(), m, q, false, b.value().data().data(),
                                          q, p, false, ga.data().data(), false);
                       t.accumulate(a.id, std::move(ga));
                     }
                     if (b.requires_grad()) {
                       Tensor<T> gb({q, p});
                       lion::detail::gemm(g.data().data(), m, q, true, a.value().data().data(), m,
                                          p, false, gb.data().data(), false);
                       t.accumulate(b.id, std::move(gb));
                     }
                   });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "add");
  return tape.push(a.value() + b.value(), a.requires_grad() || b.requires_grad(),
                   [a, b](Tape<T>& t, const Tensor<T>& g) {
                     t.accumulate(a.id, g);
                     t.accumulate(b.id, g);
                   });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "sub");
  return tape.push(a.value() - b.value(), a.requires_grad() || b.requires_grad(),
                   [a, b](Tape<T>& t, const Tensor<T>& g) {
                     t.accumulate(a.id, g);
                     if (b.requires_grad()) t.accumulate(b.id, T(-1) * g);
                   });
}

/// Element-wise product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return tape.push(std::move(out), a.requires_grad() || b.requires_grad(),
                   [a, b](Tape<T>& t, const Tensor<T>& g) {
                     if (a.requires_grad()) {
                       Tensor<T> ga = g;
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= b.value()[i];
                       t.accumulate(a.id, std::move(ga));
                     }
                     if (b.requires_grad()) {
                       Tensor<T> gb = g;
                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= a.value()[i];
                       t.accumulate(b.id, std::move(gb));
                     }
                   });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  return a.tape->push(s * a.value(), a.requires_grad(),
                      [a, s](Tape<T>& t, const Tensor<T>& g) { t.accumulate(a.id, s * g); });
}

/// Adds a length-n bias to every row of an m x n matrix, the only broadcast
/// the library supports.
template <class T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
  auto& tape = detail::same_tape(a, bias);
  lion::detail::require_matrix(a.shape(), "add_bias");
  const auto m = a.shape()[0], n = a.shape()[1];
  if (bias.value().size() != n)
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " for rows of " +
                         shape_str(a.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) += bias.value()[j];
  return tape.push(std::move(out), a.requires_grad() || bias.requires_grad(),
                   [a, bias, m, n](Tape<T>& t, const Tensor<T>& g) {
                     t.accumulate(a.id, g);
                     if (bias.requires_grad()) {
                       Tensor<T> gb(bias.shape());
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j) gb[j] += g(i, j);
                       t.accumulate(bias.id, std::move(gb));
                     }
                   });
}

template <class T>
Var<T> softmax_rows(Var<T> a) {
  Tensor<T> y = lion::softmax_rows(a.value());
  const auto m = y.shape()[0], n = y.shape()[1];
  Tensor<T> y_copy = a.requires_grad() ? y : Tensor<T>();
  return a.tape->push(std::move(y), a.requires_grad(),
                      [a, m, n, y = std::move(y_copy)](Tape<T>& t, const Tensor<T>& g) {
                        Tensor<T> gx({m, n});
                        for (std::size_t i = 0; i < m; ++i) {
                          T s = 0;
                          for (std::size_t j = 0; j < n; ++j) s += g(i, j) * y(i, j);
                          for (std::size_t j = 0; j < n; ++j) gx(i, j) = y(i, j) * (g(i, j) - s);
                        }
                        t.accumulate(a.id, std::move(gx));
                      });
}

/// Per-row standardisation without affine parameters.
template <class T>
Var<T> layer_norm_rows(Var<T> a, T eps = T(1e-5)) {
  lion::detail::require_matrix(a.shape(), "layer_norm_rows");
  const auto m = a.shape()[0], n = a.shape()[1];
  Tensor<T> y({m, n});
  std::vector<T> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += a.value()(i, j);
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T d = a.value()(i, j) - mean;
      var += d * d;
    }
    var /= T(n);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) y(i, j) = (a.value()(i, j) - mean) * inv_std[i];
  }
  Tensor<T> y_copy = a.requires_grad() ? y : Tensor<T>();
  return a.tape->push(std::move(y), a.requires_grad(),
                      [a, m, n, inv_std = std::move(inv_std), y = std::move(y_copy)](
                          Tape<T>& t, const Tensor<T>& g) {
                        Tensor<T> gx({m, n});
                        for (std::size_t i = 0; i < m; ++i) {
                          T mg = 0, mgy = 0;
                          for (std::size_t j = 0; j < n; ++j) {
                            mg += g(i, j);
                            mgy += g(i, j) * y(i, j);
                          }
                          mg /= T(n);
                          mgy /= T(n);
                          for (std::size_t j = 0; j < n; ++j)
                            gx(i, j) = inv_std[i] * (g(i, j) - mg - y(i, j) * mgy);
                        }
                        t.accumulate(a.id, std::move(gx));
                      });
}

/// tanh approximation of GELU.
template <class T>
Var<T> gelu(Var<T> a) {
  static constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T k = T(0.044715);
  const auto n = a.value().size();
  const T* x = a.value().data().data();
  Tensor<T> th(a.shape());
  lion::detail::blockwise(x, th.data().data(), n, [](const auto& v) { return (c * (v + k * v.cube())).tanh(); });
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < n; ++i) out[i] = T(0.5) * x[i] * (T(1) + th[i]);
  if (!a.requires_grad()) th = Tensor<T>();
  return a.tape->push(std::move(out), a.requires_grad(),
                      [a, th = std::move(th)](Tape<T>& t, const Tensor<T>& g) {
                        const auto& xv = a.value();
                        Tensor<T> gx(g.shape());
                        for (std::size_t i = 0; i < gx.size(); ++i) {
                          const T x = xv[i], h = th[i];
                          gx[i] = g[i] * (T(0.5) * (T(1) + h) +
                                          T(0.5) * x * (T(1) - h * h) * c * (T(1) + T(3) * k * x * x));
                        }
                        t.accumulate(a.id, std::move(gx));
                      });
}

/// Rows [begin, end) of a matrix.
template <class T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end) {
  lion::detail::require_matrix(a.shape(), "slice_rows");
  const auto m = a.shape()[0], n = a.shape()[1];
  if (begin >= end || end > m)
    throw DimensionError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") of " + shape_str(a.shape()));
  const auto src = a.value().data().subspan(begin * n, (end - begin) * n);
  Tensor<T> out({end - begin, n}, std::vector<T>(src.begin(), src.end()));
  return a.tape->push(std::move(out), a.requires_grad(),
                      [a, begin, end, m, n](Tape<T>& t, const Tensor<T>& g) {
                        Tensor<T> gx({m, n});
                        std::copy(g.data().begin(), g.data().end(),
                                  gx.data().begin() + std::ptrdiff_t(begin * n));
                        t.accumulate(a.id, std::move(gx));
                      });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  Tape<T>& tape = *parts.front().tape;
  const auto n = parts.front().shape().at(1);
  std::size_t m = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.tape != &tape) throw ContractError("concat_rows: operands on different tapes");
    lion::detail::require_matrix(p.shape(), "concat_rows");
    if (p.shape()[1] != n)
      throw DimensionError("concat_rows: width " + std::to_string(p.shape()[1]) + " vs " +
                           std::to_string(n));
    m += p.shape()[0];
    rg = rg || p.requires_grad();
  }
  std::vector<T> buf;
  buf.reserve(m * n);
  for (const auto& p : parts) buf.insert(buf.end(), p.value().data().begin(), p.value().data().end());
  return tape.push(Tensor<T>({m, n}, std::move(buf)), rg,
                   [parts, n](Tape<T>& t, const Tensor<T>& g) {
                     std::size_t off = 0;
                     for (const auto& p : parts) {
                       const auto len = p.value().size();
                       if (p.requires_grad()) {
                         auto s = g.data().subspan(off, len);
                         t.accumulate(p.id, Tensor<T>(p.shape(), std::vector<T>(s.begin(), s.end())));
                       }
                       off += len;
                     }
                   });
}

/// Columns [begin, end) of a matrix.
template <class T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
  lion::detail::require_matrix(a.shape(), "slice_cols");
  const auto m = a.shape()[0], n = a.shape()[1];
  if (begin >= end || end > n)
    throw DimensionError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") of " + shape_str(a.shape()));
  const auto w = end - begin;
  Tensor<T> out({m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out(i, j) = a.value()(i, begin + j);
  return a.tape->push(std::move(out), a.requires_grad(),
                      [a, begin, w, m, n](Tape<T>& t, const Tensor<T>& g) {
                        Tensor<T> gx({m, n});
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < w; ++j) gx(i, begin + j) = g(i, j);
                        t.accumulate(a.id, std::move(gx));
                      });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  Tape<T>& tape = *parts.front().tape;
  const auto m = parts.front().shape().at(0);
  std::size_t n = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.tape != &tape) throw ContractError("concat_cols: operands on different tapes");
    lion::detail::require_matrix(p.shape(), "concat_cols");
    if (p.shape()[0] != m)
      throw DimensionError("concat_cols: height " + std::to_string(p.shape()[0]) + " vs " +
                           std::to_string(m));
    n += p.shape()[1];
    rg = rg || p.requires_grad();
  }
  Tensor<T> out({m, n});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto w = p.shape()[1];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out(i, off + j) = p.value()(i, j);
    off += w;
  }
  return tape.push(std::move(out), rg, [parts, m](Tape<T>& t, const Tensor<T>& g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const auto w = p.shape()[1];
      if (p.requires_grad()) {
        Tensor<T> gp({m, w});
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) gp(i, j) = g(i, off + j);
        t.accumulate(p.id, std::move(gp));
      }
      off += w;
    }
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T v : a.value().data()) s += v;
  return a.tape->push(Tensor<T>({1}, std::vector<T>{s}), a.requires_grad(),
                      [a](Tape<T>& t, const Tensor<T>& g) {
                        t.accumulate(a.id, Tensor<T>(a.shape(), g[0]));
                      });
}

/// mean((a - target)^2) against a constant target.
template <class T>
Var<T> mse(Var<T> a, const Tensor<T>& target) {
  if (a.shape() != target.shape())
    throw DimensionError("mse: " + shape_str(a.shape()) + " vs " + shape_str(target.shape()));
  const auto n = T(target.size());
  T s = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const T d = a.value()[i] - target[i];
    s += d * d;
  }
  return a.tape->push(Tensor<T>({1}, std::vector<T>{s / n}), a.requires_grad(),
                      [a, target, n](Tape<T>& t, const Tensor<T>& g) {
                        Tensor<T> gx(a.shape());
                        for (std::size_t i = 0; i < gx.size(); ++i)
                          gx[i] = g[0] * T(2) * (a.value()[i] - target[i]) / n;
                        t.accumulate(a.id, std::move(gx));
                      });
}

template <class T>
Var<T> frobenius_norm(Var<T> a) {
  const T nrm = lion::frobenius_norm(a.value());
  return a.tape->push(Tensor<T>({1}, std::vector<T>{nrm}), a.requires_grad(),
                      [a, nrm](Tape<T>& t, const Tensor<T>& g) {
                        if (nrm == T(0)) return;
                        t.accumulate(a.id, (g[0] / nrm) * a.value());
                      });
}

}  // namespace ad

/// Maximum over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar function of one tensor argument. Each evaluation gets a fresh tape.
using ScalarFn = std::function<Var<double>(Var<double>)>;

inline double grad_check(const ScalarFn& f, const Tensor<double>& x, double eps) {
  Tensor<double> analytic;
  {
    Tape<double> tape;
    auto xv = tape.leaf(x, true);
    auto loss = f(xv);
    tape.backward(loss);
    analytic = tape.grad(xv);
  }
  auto eval = [&](const Tensor<double>& at) {
    Tape<double> tape;
    return f(tape.leaf(at, false)).value()[0];
  };
  double worst = 0;
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = eval(probe);
    probe[i] = x[i] - eps;
    const double down = eval(probe);
    probe[i] = x[i];
    const double numeric = (up - down) / (2 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace lion
