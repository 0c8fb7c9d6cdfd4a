// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors, a portable seeded generator and the handful of
// vector utilities (norms, clipping, renormalization) the rest of the
// library is built on.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <new>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "doodl/error.hpp"

namespace doodl {

using Shape = std::vector<std::size_t>;

/// Cache-line aligned allocator. Vectorized kernels choose their peeling from
/// the buffer address, so a fixed alignment keeps results bit-reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using AlignedBuffer = std::vector<double, AlignedAllocator<double>>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Row-major dense array of doubles with shape metadata.
///
/// Tensors are plain values: copying copies the buffer. The invariant
/// `shape_size(shape()) == size()` holds for every constructed tensor.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, const std::vector<double>& data) : Tensor(std::move(shape), AlignedBuffer(data.begin(), data.end())) {}

  Tensor(Shape shape, AlignedBuffer data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      detail::fail_invalid("tensor shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                           " elements");
  }

  /// 1-D tensor from a list of values.
  static Tensor vec(std::initializer_list<double> values) { return Tensor({values.size()}, AlignedBuffer(values)); }
  static Tensor vec(const std::vector<double>& values) { return Tensor({values.size()}, values); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Same buffer under a new shape of equal element count.
  Tensor reshaped(Shape shape) const& { return Tensor(std::move(shape), data_); }
  Tensor reshaped(Shape shape) && { return Tensor(std::move(shape), std::move(data_)); }

  bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& o) {
    check_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    check_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(double s, Tensor a) { return a *= s; }
  friend Tensor operator*(Tensor a, double s) { return a *= s; }
  friend Tensor operator-(Tensor a) { return a *= -1.0; }

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

  void check_same(const Tensor& o, const char* op) const {
    if (shape_ != o.shape_)
      detail::fail_invalid(std::string("shape mismatch in ") + op + ": " + shape_str(shape_) + " vs " +
                           shape_str(o.shape_));
  }

 private:
  Shape shape_;
  AlignedBuffer data_;
};

/// a*x + b*y, evaluated elementwise in that order.
inline Tensor lincomb(double a, const Tensor& x, double b, const Tensor& y) {
  x.check_same(y, "lincomb");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * y[i];
  return out;
}

inline double dot(const Tensor& a, const Tensor& b) {
  a.check_same(b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  a.check_same(b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// ‖a−b‖ / max(‖b‖, floor)
inline double rel_error(const Tensor& a, const Tensor& b, double floor = 1e-300) {
  return l2_norm(a - b) / std::max(l2_norm(b), floor);
}

/// Scales `t` onto the sphere of radius `target_norm`.
inline Tensor renormalize_to(const Tensor& t, double target_norm) {
  if (!(target_norm > 0.0)) throw InvalidArgument("renormalize_to: target norm must be positive");
  const double n = l2_norm(t);
  if (!(n > 0.0)) throw DegenerateInput("renormalize_to: zero-norm input");
  const double scale = target_norm / n;
  if (scale == 1.0) return t;
  return t * scale;
}

inline Tensor clip_elementwise(const Tensor& t, double bound) {
  if (!(bound > 0.0)) throw InvalidArgument("clip_elementwise: bound must be positive");
  Tensor out = t;
  for (double& v : out.values()) v = std::clamp(v, -bound, bound);
  return out;
}

inline Tensor concat(std::span<const Tensor> parts) {
  std::vector<double> flat;
  for (const Tensor& p : parts) flat.insert(flat.end(), p.values().begin(), p.values().end());
  return Tensor::vec(std::move(flat));
}

/// splitmix64 stream. Identical seeds give identical streams on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    if (n == 0) throw InvalidArgument("Rng::below: empty range");
    return std::min(static_cast<std::size_t>(uniform() * static_cast<double>(n)), n - 1);
  }

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

/// I.i.d. standard normals via Box–Muller; each pair of uniforms yields two
/// samples, and an odd trailing element discards the sine branch.
inline Tensor gaussian_sample(Rng& rng, const Shape& shape) {
  if (shape.empty() || std::any_of(shape.begin(), shape.end(), [](std::size_t d) { return d == 0; }))
    throw InvalidArgument("gaussian_sample: shape must be nonempty with positive dims, got " + shape_str(shape));
  Tensor out(shape);
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; i += 2) {
    const double u1 = 1.0 - rng.uniform();  // (0, 1]
    const double u2 = rng.uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    out[i] = r * std::cos(theta);
    if (i + 1 < n) out[i + 1] = r * std::sin(theta);
  }
  return out;
}

namespace detail {

// Postcondition sweep for debug builds.
inline void check_finite(const Tensor& t, const char* where) {
#ifndef NDEBUG
  if (!t.all_finite()) throw NumericalFailure(std::string("non-finite values produced by ") + where, -1);
#else
  (void)t;
  (void)where;
#endif
}

}  // namespace detail
}  // namespace doodl
