#include <algorithm>
#include <cmath>
#include <cstdint>

#include "kernels_impl.hpp"

namespace lexlm::kernels {
namespace {

float dot_f32(const float* a, const float* b, std::size_t n) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy_f32(float* y, float alpha, const float* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void quantize_row_q8_0(const float* x, BlockQ8_0* out, std::size_t n) {
  const std::size_t nb = n / kQ8BlockSize;
  for (std::size_t b = 0; b < nb; ++b) {
    const float* src = x + b * kQ8BlockSize;
    float amax = 0.0f;
    for (std::size_t i = 0; i < kQ8BlockSize; ++i) amax = std::max(amax, std::fabs(src[i]));

    BlockQ8_0& blk = out[b];
    if (amax == 0.0f) {
      blk.scale = fp32_to_fp16(0.0f);
      std::fill(std::begin(blk.codes), std::end(blk.codes), std::int8_t{0});
      continue;
    }
    const float d = amax / 127.0f;
    blk.scale = fp32_to_fp16(d);
    for (std::size_t i = 0; i < kQ8BlockSize; ++i) {
      const float q = std::clamp(round_away(src[i] / d), -127.0f, 127.0f);
      blk.codes[i] = static_cast<std::int8_t>(q);
    }
  }
}

void dequantize_row_q8_0(const BlockQ8_0* in, float* out, std::size_t n) {
  const std::size_t nb = n / kQ8BlockSize;
  for (std::size_t b = 0; b < nb; ++b) {
    const float d = fp16_to_fp32(in[b].scale);
    for (std::size_t i = 0; i < kQ8BlockSize; ++i) {
      out[b * kQ8BlockSize + i] = d * static_cast<float>(in[b].codes[i]);
    }
  }
}

float dot_q8_0(const BlockQ8_0* a, const BlockQ8_0* b, std::size_t n_blocks) {
  float acc = 0.0f;
  for (std::size_t k = 0; k < n_blocks; ++k) {
    std::int32_t isum = 0;
    for (std::size_t i = 0; i < kQ8BlockSize; ++i) {
      isum += static_cast<std::int32_t>(a[k].codes[i]) * static_cast<std::int32_t>(b[k].codes[i]);
    }
    acc += static_cast<float>(isum) * (fp16_to_fp32(a[k].scale) * fp16_to_fp32(b[k].scale));
  }
  return acc;
}

}  // namespace

const KernelTable& scalar_table() noexcept {
  static const KernelTable table{Backend::Scalar,      "scalar",
                                 &dot_f32,             &axpy_f32,
                                 &quantize_row_q8_0,   &dequantize_row_q8_0,
                                 &dot_q8_0};
  return table;
}

}  // namespace lexlm::kernels
