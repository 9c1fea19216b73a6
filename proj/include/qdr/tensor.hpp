#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace qdr {

/// Raised for contract violations (shape mismatch, bad config, invalid input).
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A NaN or Inf reached a place that needs finite values. Training turns
/// this into an abort instead of a plain failure.
class NonFiniteError : public Error {
public:
  using Error::Error;
};

/// NCHW shape. Parameters reuse it: conv weights are (out, in, kh, kw),
/// vectors are (c, 1, 1, 1).
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
    return os.str();
  }
};

// Aligned storage keeps vectorized reductions in the same order from run to
// run; with plain malloc the peeled head depends on the heap address.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
class Tensor {
public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(shape), data_(shape.size(), fill) {
    if (shape.n <= 0 || shape.c <= 0 || shape.h <= 0 || shape.w <= 0)
      throw Error("tensor shape must be positive, got " + shape.str());
  }
  Tensor(Shape shape, const std::vector<T>& values)
      : shape_(shape), data_(values.begin(), values.end()) {
    if (data_.size() != shape.size())
      throw Error("tensor data size does not match shape " + shape.str());
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& operator()(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  const T& operator()(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

  /// Pointer to the (n, c) plane.
  T* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T{0}); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
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
  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  void check_same(const Tensor& o, const char* what) const {
    if (!(o.shape_ == shape_))
      throw Error(std::string("shape mismatch in ") + what + ": " + shape_.str() +
                  " vs " + o.shape_.str());
  }

private:
  Shape shape_{};
  AlignedVector<T> data_;
};

template <typename T>
Tensor<T> operator+(Tensor<T> a, const Tensor<T>& b) {
  a += b;
  return a;
}

template <typename T>
Tensor<T> operator-(Tensor<T> a, const Tensor<T>& b) {
  a -= b;
  return a;
}

template <typename T>
double sum(const Tensor<T>& t) {
  double s = 0;
  for (T v : t.values()) s += v;
  return s;
}

template <typename T>
double mean(const Tensor<T>& t) {
  return t.empty() ? 0.0 : sum(t) / static_cast<double>(t.size());
}

template <typename T>
double squared_norm(const Tensor<T>& t) {
  double s = 0;
  for (T v : t.values()) s += static_cast<double>(v) * v;
  return s;
}

template <typename T>
T max_abs(std::span<const T> v) {
  T m = 0;
  for (T x : v) m = std::max(m, static_cast<T>(std::abs(x)));
  return m;
}

template <typename T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

/// Copies sample `n` of `src` into a single-sample tensor.
template <typename T>
Tensor<T> slice_sample(const Tensor<T>& src, int n) {
  Shape s = src.shape();
  s.n = 1;
  Tensor<T> out(s);
  std::copy_n(src.plane(n, 0), s.size(), out.data());
  return out;
}

/// Stacks equally-shaped single-sample tensors along the batch axis.
template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw Error("cannot stack an empty list");
  Shape s = items.front().shape();
  s.n = 0;
  for (const auto& t : items) s.n += t.shape().n;
  Tensor<T> out(s);
  std::size_t off = 0;
  for (const auto& t : items) {
    if (t.shape().c != s.c || t.shape().h != s.h || t.shape().w != s.w)
      throw Error("stack: inconsistent shapes");
    std::copy(t.values().begin(), t.values().end(), out.data() + off);
    off += t.size();
  }
  return out;
}

}  // namespace qdr
