#pragma once

// Q8_0: symmetric 8-bit block quantization. Every 32 consecutive elements
// share one scale d = amax / 127, stored as fp16, and
// code = round_half_away(w / d), so codes stay in [-127, 127].

#include <span>
#include <string_view>
#include <vector>

#include "lexlm/kernels.hpp"
#include "lexlm/tensor.hpp"

namespace lexlm {

using kernels::BlockQ8_0;
using kernels::kQ8BlockSize;

struct QuantizedTensor {
  Shape shape;
  std::vector<BlockQ8_0> blocks;
  /// Zero elements appended to reach a whole number of blocks.
  std::size_t pad = 0;

  std::size_t numel() const noexcept { return shape_numel(shape); }
  std::size_t byte_size() const noexcept { return blocks.size() * sizeof(BlockQ8_0); }
  std::size_t cols() const noexcept { return shape.empty() ? 1 : shape.back(); }
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : numel() / cols(); }
  /// Blocks of row r. Only valid when cols() is a multiple of 32.
  std::span<const BlockQ8_0> row(std::size_t r) const noexcept {
    const std::size_t per_row = cols() / kQ8BlockSize;
    return {blocks.data() + r * per_row, per_row};
  }
};

bool operator==(const QuantizedTensor& a, const QuantizedTensor& b) noexcept;

/// Size in bytes of n elements stored as Q8_0 (n rounded up to whole blocks).
constexpr std::size_t q8_0_bytes(std::size_t n) noexcept {
  return (n + kQ8BlockSize - 1) / kQ8BlockSize * sizeof(BlockQ8_0);
}

/// A matrix can feed qmatmul when its rows split into whole blocks.
bool q8_0_row_aligned(const Shape& shape) noexcept;

/// Throws DataError naming `name` and the flat index on a non-finite input,
/// and on a block scale that overflows fp16.
QuantizedTensor quantize_q8_0(const Tensor& t, std::string_view name = "tensor");
/// Throws DataError if a block holds the code -128, which quantize never emits.
Tensor dequantize_q8_0(const QuantizedTensor& q);

/// Dynamic Q8_0 quantization of an activation row; x.size() % 32 == 0.
void quantize_activation(std::span<const float> x, std::span<BlockQ8_0> out);

/// out[r] = sum over blocks of d_w * d_x * int_dot(w row r, xq).
void qmatvec(const QuantizedTensor& w, std::span<const BlockQ8_0> xq, std::span<float> out);

/// w [n x k] times x [k] -> [n], or x [m x k] -> [m x n]. x is quantized per
/// 32-block on every call.
Tensor qmatmul(const QuantizedTensor& w, const Tensor& x);

}  // namespace lexlm
