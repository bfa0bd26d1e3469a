#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace prunelab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major float32 array. The universal value type for images,
/// activations, weights and gradients.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  /// Throws Error(kShapeMismatch) when data.size() != product of shape.
  Tensor(Shape shape, std::vector<float> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  float* ptr() noexcept { return data_.data(); }
  const float* ptr() const noexcept { return data_.data(); }
  std::vector<float>& storage() noexcept { return data_; }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  float& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
  float operator()(std::size_t i, std::size_t j) const noexcept {
    return data_[i * shape_[1] + j];
  }
  float& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  float operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Same data, new shape with identical element count.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(float value);
  bool all_finite() const noexcept;

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// Shapes equal and every element bitwise identical.
bool bit_equal(const Tensor& a, const Tensor& b);

/// Throws Error(kShapeMismatch) naming `what` when shapes differ.
void require_shape(const Tensor& t, const Shape& expected, const char* what);

}  // namespace prunelab
