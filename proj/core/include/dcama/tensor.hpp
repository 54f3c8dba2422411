#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcama {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape/rank violations and malformed inputs.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf escaping an operation, divergence during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

// File/manifest problems.
class IoError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw DimensionError("shape dimensions must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace memory {

namespace detail {
inline std::atomic<std::int64_t>& current_counter() {
  static std::atomic<std::int64_t> c{0};
  return c;
}
inline std::atomic<std::int64_t>& peak_counter() {
  static std::atomic<std::int64_t> p{0};
  return p;
}
inline void add(std::int64_t bytes) {
  auto cur = current_counter().fetch_add(bytes) + bytes;
  auto& peak = peak_counter();
  std::int64_t prev = peak.load();
  while (cur > prev && !peak.compare_exchange_weak(prev, cur)) {
  }
}
inline void sub(std::int64_t bytes) { current_counter().fetch_sub(bytes); }
}  // namespace detail

inline std::int64_t current_bytes() { return detail::current_counter().load(); }
inline std::int64_t peak_bytes() { return detail::peak_counter().load(); }
inline void reset_peak() { detail::peak_counter().store(current_bytes()); }

// Counts live tensor buffer bytes; used by the n-shot benchmark for its
// working-set estimate.
template <class T>
struct TrackingAllocator {
  using value_type = T;
  TrackingAllocator() = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) {}
  T* allocate(std::size_t n) {
    detail::add(static_cast<std::int64_t>(n * sizeof(T)));
    return static_cast<T*>(::operator new(n * sizeof(T)));
  }
  void deallocate(T* p, std::size_t n) {
    detail::sub(static_cast<std::int64_t>(n * sizeof(T)));
    ::operator delete(p);
  }
  bool operator==(const TrackingAllocator&) const { return true; }
};

}  // namespace memory

// Dense row-major n-dimensional array. Spatial tensors are channel-last
// ([h,w,c]) so flattening pixels into tokens is a plain reshape.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape)
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(numel_of(shape_)), T(0)) {}
  BasicTensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    if (static_cast<std::int64_t>(values.size()) != numel_of(shape_))
      throw DimensionError("value count does not match shape " + shape_str(shape_));
    data_.assign(values.begin(), values.end());
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
  static BasicTensor full(Shape shape, T v) {
    BasicTensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }
  static BasicTensor scalar(T v) { return full({1}, v); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return {data_.data(), data_.size()}; }
  std::span<const T> values() const { return {data_.data(), data_.size()}; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  T& at(int i, int j) { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }
  const T& at(int i, int j) const { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }
  T& at(int i, int j, int k) {
    return data_[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
  }
  const T& at(int i, int j, int k) const {
    return data_[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
  }
  T& at(int i, int j, int k, int l) {
    return data_[((static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k) * dim(3) + l];
  }
  const T& at(int i, int j, int k, int l) const {
    return data_[((static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k) * dim(3) + l];
  }

  T item() const {
    if (numel() != 1) throw DimensionError("item() requires a single-element tensor");
    return data_[0];
  }

  // Metadata-only reinterpretation; element count must match.
  BasicTensor reshaped(Shape s) const {
    if (numel_of(s) != numel())
      throw DimensionError("reshape " + shape_str(shape_) + " -> " + shape_str(s) +
                           " changes element count");
    BasicTensor out = *this;
    out.shape_ = std::move(s);
    return out;
  }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  bool same_shape(const BasicTensor& o) const { return shape_ == o.shape_; }

  template <class U>
  BasicTensor<U> cast() const {
    BasicTensor<U> out(shape_);
    for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

  bool operator==(const BasicTensor& o) const {
    return shape_ == o.shape_ && std::equal(data_.begin(), data_.end(), o.data_.begin());
  }

 private:
  Shape shape_;
  std::vector<T, memory::TrackingAllocator<T>> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <class T>
void ensure_finite(const BasicTensor<T>& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + " produced a non-finite value");
}

template <class T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (!a.same_shape(b))
    throw DimensionError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  T m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace dcama
