#include "tense/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace tense {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> ids) {
  if (t.rank() == 0) throw ShapeError("gather_rows on a scalar");
  Shape out_shape = t.shape();
  out_shape[0] = ids.size();
  const std::size_t row = t.size() / t.dim(0);
  Tensor out(out_shape);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] >= t.dim(0)) throw ShapeError("gather_rows index out of range");
    std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(ids[k] * row), row,
                out.data().begin() + static_cast<std::ptrdiff_t>(k * row));
  }
  return out;
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("stack of zero tensors");
  Shape shape{items.size()};
  shape.insert(shape.end(), items[0].shape().begin(), items[0].shape().end());
  Tensor out(shape);
  const std::size_t n = items[0].size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != items[0].shape())
      throw ShapeError("stack: shape " + shape_str(items[i].shape()) + " differs from " +
                       shape_str(items[0].shape()));
    std::copy(items[i].data().begin(), items[i].data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return out;
}

double sum(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += x;
  return s;
}

double l1_norm(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += std::abs(static_cast<double>(x));
  return s;
}

double l2_norm(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

}  // namespace tense
