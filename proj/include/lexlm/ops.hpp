#pragma once

// Core FP32 kernels on Tensor. All of them leave their inputs untouched and
// route inner loops through kernels::active().

#include <cstdint>
#include <span>

#include "lexlm/tensor.hpp"

namespace lexlm::ops {

inline constexpr float kLayerNormEps = 1e-5f;

/// c = a[m x k] * b[k x n]. Each output sums over k in sequential order.
Tensor matmul(const Tensor& a, const Tensor& b);

/// c = a[m x k] * w[n x k]^T, i.e. c[i][j] = dot(a row i, w row j).
Tensor matmul_nt(const Tensor& a, const Tensor& w);

/// Softmax over the last axis, with max subtraction.
Tensor softmax(const Tensor& logits);
void softmax_inplace(std::span<float> v) noexcept;

/// Normalize every last-axis slice to zero mean and unit variance, then
/// apply gamma * x_hat + beta.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = kLayerNormEps);

/// One row. Writes mean and reciprocal std when the pointers are non-null.
void layernorm_row(std::span<const float> x, std::span<const float> gamma,
                   std::span<const float> beta, float eps, std::span<float> out,
                   float* mean_out = nullptr, float* rstd_out = nullptr) noexcept;

/// GELU, tanh approximation:
/// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
float gelu(float x) noexcept;
/// d gelu / dx for the same approximation.
float gelu_grad(float x) noexcept;
Tensor gelu(const Tensor& x);

/// Rows of table[V x d] selected by ids -> [len x d].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids);

}  // namespace lexlm::ops
