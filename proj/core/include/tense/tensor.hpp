#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "tense/error.hpp"

namespace tense {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape);

/// Dense row-major n-dimensional array. A rank-0 tensor holds one element.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : data_(1, T{0}) {}
  explicit BasicTensor(Shape shape) : shape_(std::move(shape)), data_(numel(shape_), T{0}) {}
  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel(shape_))
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
  }
  BasicTensor(Shape shape, T fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

  static BasicTensor scalar(T v) { return BasicTensor(Shape{}, std::vector<T>{v}); }
  static BasicTensor vector(std::initializer_list<T> v) {
    return BasicTensor(Shape{v.size()}, std::vector<T>(v));
  }
  static BasicTensor vector(std::vector<T> v) {
    Shape s{v.size()};
    return BasicTensor(std::move(s), std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  BasicTensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return BasicTensor(std::move(shape), data_);
  }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool operator==(const BasicTensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

template <typename U, typename T>
BasicTensor<U> tensor_cast(const BasicTensor<T>& t) {
  std::vector<U> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<U>(t[i]);
  return BasicTensor<U>(t.shape(), std::move(out));
}

/// Row `i` of the leading dimension, as a tensor of the remaining shape.
template <typename T>
BasicTensor<T> slice_row(const BasicTensor<T>& t, std::size_t i) {
  if (t.rank() == 0 || i >= t.dim(0)) throw ShapeError("slice_row out of range");
  Shape inner(t.shape().begin() + 1, t.shape().end());
  const std::size_t n = numel(inner);
  auto first = t.data().begin() + static_cast<std::ptrdiff_t>(i * n);
  return BasicTensor<T>(std::move(inner), std::vector<T>(first, first + static_cast<std::ptrdiff_t>(n)));
}

/// Rows `ids` of the leading dimension, stacked.
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> ids);

/// Stacks equally-shaped tensors along a new leading dimension.
Tensor stack(std::span<const Tensor> items);

/// Sum of all elements, accumulated in double.
double sum(std::span<const float> v);
double l1_norm(std::span<const float> v);
double l2_norm(std::span<const float> v);

}  // namespace tense
