#include "rawformer/nn/tensor.hpp"

#include <algorithm>

#include "rawformer/errors.hpp"

namespace rawformer::nn {

int Shape::operator[](int axis) const {
  switch (axis) {
    case 0: return n;
    case 1: return c;
    case 2: return h;
    case 3: return w;
    default: throw DimensionError("axis " + std::to_string(axis) + " out of range [0,3]");
  }
}

std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) +
         "," + std::to_string(s.w) + ")";
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(shape), data_(shape.numel(), fill) {
  if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1)
    throw DimensionError("tensor extents must be >= 1, got " + to_string(shape));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
  if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1)
    throw DimensionError("tensor extents must be >= 1, got " + to_string(shape));
  if (data_.size() != shape.numel())
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + to_string(shape));
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape s) const& {
  return Tensor(*this).reshaped(s);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape s) && {
  if (s.numel() != shape_.numel())
    throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(s));
  return Tensor(s, std::move(data_));
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace rawformer::nn
