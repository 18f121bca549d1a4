#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "c2t/error.hpp"

namespace c2t::nn {

using Shape = std::vector<std::size_t>;

/// 64-byte aligned allocator. Eigen peels unaligned heads off vectorized
/// loops, so equal data at different alignments can sum in a different order.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class S>
using Buffer = std::vector<S, AlignedAllocator<S>>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor. Rank 0 is not used; scalars are shape {1}.
template <class S>
struct BasicTensor {
  Shape shape;
  Buffer<S> data;
  bool requires_grad = false;

  BasicTensor() = default;
  BasicTensor(Shape s, Buffer<S> values, bool grad = false)
      : shape(std::move(s)), data(std::move(values)), requires_grad(grad) {
    check();
  }
  BasicTensor(Shape s, const std::vector<S>& values, bool grad = false)
      : BasicTensor(std::move(s), Buffer<S>(values.begin(), values.end()), grad) {}
  BasicTensor(Shape s, std::initializer_list<S> values, bool grad = false)
      : BasicTensor(std::move(s), Buffer<S>(values), grad) {}

  static BasicTensor zeros(Shape s) {
    const std::size_t n = shape_size(s);
    return BasicTensor(std::move(s), Buffer<S>(n, S(0)));
  }
  static BasicTensor filled(Shape s, S value) {
    const std::size_t n = shape_size(s);
    return BasicTensor(std::move(s), Buffer<S>(n, value));
  }
  static BasicTensor scalar(S value) { return BasicTensor({1}, {value}); }
  static BasicTensor matrix(std::size_t rows, std::size_t cols, const std::vector<S>& values) {
    return BasicTensor({rows, cols}, std::move(values));
  }

  void check() const {
    for (std::size_t d : shape)
      if (d == 0) raise(ErrorKind::ShapeError, "zero dimension in shape " + shape_str(shape));
    if (shape.empty() || shape_size(shape) != data.size())
      raise(ErrorKind::ShapeError, "shape " + shape_str(shape) + " does not match " +
                                       std::to_string(data.size()) + " values");
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  // 2-D views treat everything but the last axis as rows.
  std::size_t cols() const { return shape.back(); }
  std::size_t rows() const { return data.size() / shape.back(); }

  S& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  const S& at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<S> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const S> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](S v) { return std::isfinite(v); });
  }

  template <class U>
  BasicTensor<U> cast() const {
    BasicTensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    out.requires_grad = requires_grad;
    return out;
  }
};

using Tensor = BasicTensor<float>;

/// log(sum(exp(x))) accumulated in double with the max shifted out.
template <class S>
double logsumexp(std::span<const S> x) {
  if (x.empty()) raise(ErrorKind::InvalidInput, "logsumexp of empty vector");
  double m = -INFINITY;
  for (S v : x) m = std::max(m, static_cast<double>(v));
  if (!std::isfinite(m)) return m;
  double acc = 0.0;
  for (S v : x) acc += std::exp(static_cast<double>(v) - m);
  return m + std::log(acc);
}

inline double log_add(double a, double b) {
  if (a == -INFINITY) return b;
  if (b == -INFINITY) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

/// Numerically stable log-softmax of a single vector.
template <class S>
std::vector<S> log_softmax(std::span<const S> logits) {
  if (logits.empty()) raise(ErrorKind::InvalidInput, "log_softmax of empty vector");
  for (S v : logits)
    if (!std::isfinite(v)) raise(ErrorKind::InvalidInput, "log_softmax input is not finite");
  const double lse = logsumexp(logits);
  std::vector<S> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    // Subtract in double so the result can never round above zero.
    out[i] = static_cast<S>(std::min(0.0, static_cast<double>(logits[i]) - lse));
  }
  return out;
}

template <class S>
std::vector<S> log_softmax(const std::vector<S>& logits) {
  return log_softmax(std::span<const S>(logits));
}

}  // namespace c2t::nn
