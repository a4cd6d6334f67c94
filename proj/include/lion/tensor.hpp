// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors plus the handful of non-differentiable kernels the
// rest of the library builds on. Matrix products are delegated to Eigen.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace lion {

enum class DType { f32, f64 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "lion tensors hold f32 or f64 only");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  if (s.empty()) return 0;
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Operation undefined for the given values (empty tensor, zero vector, NaN...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_numel(shape_))
      throw DimensionError("buffer of " + std::to_string(data_.size()) +
                           " elements does not match shape " + shape_str(shape_));
  }

  /// Builds a 2-D tensor from nested rows, handy in tests.
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> buf;
    buf.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      buf.insert(buf.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(buf));
  }

  static Tensor vector(std::initializer_list<T> v) {
    return Tensor({v.size()}, std::vector<T>(v));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T(1);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return cols_; }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool on) {
    requires_grad_ = on;
    return *this;
  }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& buffer() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  /// Same buffer, new shape with the same element count.
  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  void check_extents() {
    for (auto e : shape_)
      if (e == 0) throw DimensionError("zero extent in shape " + shape_str(shape_));
    cols_ = shape_.size() < 2 ? 1 : shape_numel(shape_) / shape_[0];
  }

  Shape shape_;
  std::size_t cols_ = 1;
  std::vector<T> data_;
  bool requires_grad_ = false;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require_matrix(const Shape& s, const char* what) {
  if (s.size() != 2)
    throw DimensionError(std::string(what) + " expects a 2-D tensor, got " + shape_str(s));
}

/// c (+)= op(a) * op(b) for row-major buffers; op is optional transposition.
/// out[i] = f(in[i]) evaluated in fixed 16-wide packets on a local buffer, so
/// vectorised transcendental functions give the same bits regardless of how
/// the caller's memory happens to be aligned.
template <class T, class F>
void blockwise(const T* in, T* out, std::size_t n, F&& f) {
  constexpr std::size_t W = 16;
  Eigen::Array<T, W, 1> buf;
  for (std::size_t i = 0; i < n; i += W) {
    const std::size_t len = std::min(W, n - i);
    buf.setZero();
    std::copy(in + i, in + i + len, buf.data());
    const Eigen::Array<T, W, 1> r = f(buf);
    std::copy(r.data(), r.data() + len, out + i);
  }
}

template <class T>
void gemm(const T* a, std::size_t ar, std::size_t ac, bool ta, const T* b, std::size_t br,
          std::size_t bc, bool tb, T* c, bool accumulate) {
  using Map = Eigen::Map<const RowMat<T>>;
  Map A(a, Eigen::Index(ar), Eigen::Index(ac));
  Map B(b, Eigen::Index(br), Eigen::Index(bc));
  const auto m = Eigen::Index(ta ? ac : ar);
  const auto q = Eigen::Index(tb ? br : bc);
  Eigen::Map<RowMat<T>> C(c, m, q);
  if (!accumulate) C.setZero();
  if (ta && tb)
    C.noalias() += A.transpose() * B.transpose();
  else if (ta)
    C.noalias() += A.transpose() * B;
  else if (tb)
    C.noalias() += A * B.transpose();
  else
    C.noalias() += A * B;
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a.shape(), "matmul");
  detail::require_matrix(b.shape(), "matmul");
  if (a.shape()[1] != b.shape()[0])
    throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  Tensor<T> c({a.shape()[0], b.shape()[1]});
  detail::gemm(a.data().data(), a.shape()[0], a.shape()[1], false, b.data().data(),
               b.shape()[0], b.shape()[1], false, c.data().data(), false);
  return c;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_matrix(a.shape(), "transpose");
  const auto r = a.shape()[0], c = a.shape()[1];
  Tensor<T> t({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t(j, i) = a(i, j);
  return t;
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

template <class T>
Tensor<T> operator*(T s, const Tensor<T>& a) {
  Tensor<T> out = a;
  for (auto& v : out.data()) v *= s;
  return out;
}

/// sqrt of the sum of squared entries, accumulated in double.
template <class T>
T frobenius_norm(const Tensor<T>& t) {
  if (t.empty()) throw DomainError("frobenius_norm of an empty tensor");
  long double acc = 0;
  for (T v : t.data()) acc += static_cast<long double>(v) * v;
  return static_cast<T>(std::sqrt(acc));
}

template <class T>
T dot(std::span<const T> u, std::span<const T> v) {
  if (u.size() != v.size())
    throw DimensionError("dot: lengths " + std::to_string(u.size()) + " vs " +
                         std::to_string(v.size()));
  long double acc = 0;
  for (std::size_t i = 0; i < u.size(); ++i) acc += static_cast<long double>(u[i]) * v[i];
  return static_cast<T>(acc);
}

/// Cosine of the angle between two flattened tensors. Throws DomainError when
/// either side is the zero vector.
template <class T>
T cosine_similarity(std::span<const T> u, std::span<const T> v) {
  if (u.size() != v.size())
    throw DimensionError("cosine_similarity: lengths " + std::to_string(u.size()) + " vs " +
                         std::to_string(v.size()));
  long double uu = 0, vv = 0, uv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uu += static_cast<long double>(u[i]) * u[i];
    vv += static_cast<long double>(v[i]) * v[i];
    uv += static_cast<long double>(u[i]) * v[i];
  }
  if (uu == 0 || vv == 0) throw DomainError("cosine_similarity undefined for a zero vector");
  const long double c = uv / (std::sqrt(uu) * std::sqrt(vv));
  return static_cast<T>(std::clamp<long double>(c, -1, 1));
}

template <class T>
T cosine_similarity(const Tensor<T>& u, const Tensor<T>& v) {
  return cosine_similarity<T>(u.data(), v.data());
}

/// Row-wise softmax with max subtraction. NaN input is rejected.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& t) {
  detail::require_matrix(t.shape(), "softmax_rows");
  const auto m = t.shape()[0], n = t.shape()[1];
  Tensor<T> out(t.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const T* x = t.data().data() + i * n;
    T* y = out.data().data() + i * n;
    T mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = x[j] > mx ? x[j] : mx;
    detail::blockwise(x, y, n, [mx](const auto& v) { return (v - mx).exp(); });
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) sum += y[j];
    if (std::isnan(sum)) throw DomainError("softmax_rows: NaN in row " + std::to_string(i));
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
  }
  return out;
}

}  // namespace lion
