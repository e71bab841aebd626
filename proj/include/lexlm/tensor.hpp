#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace lexlm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_str(const Shape& shape);

// Dense FP32 tensor. Row-major, last dimension contiguous.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Size of the last dimension (1 for a scalar).
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  /// Product of all leading dimensions.
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : size() / cols(); }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> span() noexcept { return data_; }
  std::span<const float> span() const noexcept { return data_; }

  std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const float> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols(), cols()};
  }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }
  float& at(std::size_t r, std::size_t c) { return data_.at(r * cols() + c); }
  float at(std::size_t r, std::size_t c) const { return data_.at(r * cols() + c); }

  void fill(float v) noexcept;
  /// Reinterpret with a new shape of the same element count.
  void reshape(Shape shape);

  std::vector<float>& storage() noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// True when every element is finite.
bool all_finite(std::span<const float> v) noexcept;

}  // namespace lexlm
