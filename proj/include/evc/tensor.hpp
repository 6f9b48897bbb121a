#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace evc {

/// Raised when tensor extents are incompatible with an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for invalid arguments that are not shape problems.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when operations are called out of their required order.
class SequencingError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// [N, C, H, W] extents.
struct Shape {
  std::array<int, 4> dims{0, 0, 0, 0};

  Shape() = default;
  Shape(int n, int c, int h, int w) : dims{n, c, h, w} {}

  int n() const { return dims[0]; }
  int c() const { return dims[1]; }
  int h() const { return dims[2]; }
  int w() const { return dims[3]; }
  std::size_t numel() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2] * dims[3];
  }
  std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;
};

/// Dense NCHW array. Value semantics; copies are deep.
template <typename T>
class TensorT {
 public:
  using value_type = T;

  TensorT() = default;
  explicit TensorT(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {
    for (int d : shape.dims) {
      if (d < 0) throw DimensionError("negative extent in " + shape.str());
    }
  }
  TensorT(Shape shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    if (data_.size() != shape_.numel()) {
      throw DimensionError("data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_.str());
    }
  }

  static TensorT vector(std::span<const T> values) {
    return TensorT(Shape(1, static_cast<int>(values.size()), 1, 1),
                   std::vector<T>(values.begin(), values.end()));
  }

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n(); }
  int c() const { return shape_.c(); }
  int h() const { return shape_.h(); }
  int w() const { return shape_.w(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c() + c) * shape_.h() + h) * shape_.w() + w;
  }
  T& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Element-type conversion (float <-> double).
  template <typename U>
  TensorT<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return TensorT<U>(shape_, std::move(out));
  }

  friend bool operator==(const TensorT&, const TensorT&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

/// Throws DimensionError unless a and b have the same shape.
void require_same_shape(const Shape& a, const Shape& b, const char* what);

/// max |a-b| / max(|b|, tiny) over all elements.
template <typename T>
double max_relative_error(const TensorT<T>& a, const TensorT<T>& b);

}  // namespace evc
