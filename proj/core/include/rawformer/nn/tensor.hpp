#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace rawformer::nn {

/// Dense 4-d extent, always (batch, channels, height, width).
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  constexpr std::size_t numel() const noexcept {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  constexpr std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }
  int operator[](int axis) const;

  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

/// Owning channel-first float raster. Values are stored row-major inside each
/// (n, c) plane, planes ordered by channel then batch.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::size_t offset(int n, int c, int h, int w) const noexcept {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(int n, int c, int h, int w) noexcept { return data_[offset(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const noexcept { return data_[offset(n, c, h, w)]; }

  T* plane(int n, int c) noexcept { return data_.data() + offset(n, c, 0, 0); }
  const T* plane(int n, int c) const noexcept { return data_.data() + offset(n, c, 0, 0); }

  void fill(T v);
  /// Same data, new extent. Throws DimensionError when element counts differ.
  Tensor reshaped(Shape s) const&;
  Tensor reshaped(Shape s) &&;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace rawformer::nn
