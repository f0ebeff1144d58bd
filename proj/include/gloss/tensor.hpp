#ifndef GLOSS_TENSOR_HPP
#define GLOSS_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gloss/errors.hpp"

namespace gloss {

/// Extents of a tensor, outermost first (batch x channels x height x width).
using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array of rank <= 4. A default-constructed tensor is empty
/// (rank 0, no data) and stands for "not set".
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_volume(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_volume(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                           shape_str(shape_));
    }
    return shape_[axis];
  }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // NCHW element access; the tensor must be rank 4.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  // Row-major element access for rank-2 tensors.
  T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  /// Same data viewed under a new shape of equal volume.
  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  void require_same_shape(const Tensor& other, const std::string& op) const {
    if (shape_ != other.shape_) {
      throw DimensionError(op + ": shape " + shape_str(shape_) +
                           " vs " + shape_str(other.shape_));
    }
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    if (shape_.size() > 4) {
      throw DimensionError("tensor rank " + std::to_string(shape_.size()) +
                           " exceeds 4");
    }
    for (auto e : shape_) {
      if (e == 0) throw DimensionError("zero extent in shape " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Rows [begin, begin + count) of the outermost axis.
template <class T>
Tensor<T> slice_batch(const Tensor<T>& t, std::size_t begin, std::size_t count) {
  if (t.rank() == 0 || begin + count > t.dim(0) || count == 0) {
    throw DimensionError("slice_batch out of range for shape " + shape_str(t.shape()));
  }
  Shape shape = t.shape();
  const std::size_t stride = t.size() / shape[0];
  shape[0] = count;
  std::vector<T> data(t.data() + begin * stride, t.data() + (begin + count) * stride);
  return Tensor<T>(std::move(shape), std::move(data));
}

/// Concatenation along the outermost axis.
template <class T>
Tensor<T> concat_batch(const std::vector<const Tensor<T>*>& parts) {
  if (parts.empty()) throw UsageError("concat_batch of nothing");
  Shape shape = parts.front()->shape();
  std::size_t total = 0;
  for (const auto* p : parts) {
    Shape s = p->shape();
    if (s.size() != shape.size() ||
        !std::equal(s.begin() + 1, s.end(), shape.begin() + 1)) {
      throw DimensionError("concat_batch: " + shape_str(s) + " vs " + shape_str(shape));
    }
    total += s[0];
  }
  shape[0] = total;
  std::vector<T> data;
  data.reserve(shape_volume(shape));
  for (const auto* p : parts) data.insert(data.end(), p->vec().begin(), p->vec().end());
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace gloss

#endif  // GLOSS_TENSOR_HPP
