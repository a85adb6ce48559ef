#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mddn/errors.hpp"

namespace mddn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major array. Image features use NCHW.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(std::initializer_list<std::size_t> shape) : Tensor(Shape(shape)) {}
  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != shape_numel(shape_))
      throw InputError("tensor: " + std::to_string(data_.size()) + " values for shape " +
                       shape_str(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // NCHW accessors.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  // CHW accessors (images).
  T& at(std::size_t c, std::size_t h, std::size_t w) {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }
  const T& at(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  // Same data, new shape with equal element count.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw InputError("reshape: " + shape_str(shape_) + " -> " + shape_str(s));
    Tensor out;
    out.shape_ = std::move(s);
    out.data_ = data_;
    return out;
  }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  void require_same_shape(const Tensor& o, const char* who) const {
    if (shape_ != o.shape_)
      throw InputError(std::string(who) + ": shape mismatch " + shape_str(shape_) + " vs " +
                       shape_str(o.shape_));
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
Tensor<T> operator+(Tensor<T> a, const Tensor<T>& b) {
  a += b;
  return a;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.values().begin(), t.values().end(),
                     [](T v) { return v - v == T(0); });
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    T d = a[i] > b[i] ? a[i] - b[i] : b[i] - a[i];
    if (d > m) m = d;
  }
  return m;
}

}  // namespace mddn
