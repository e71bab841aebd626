// AArch64 Advanced SIMD variants. Compiled only when targeting aarch64.

#include <arm_neon.h>

#include <cstdint>

#include "kernels_impl.hpp"

namespace lexlm::kernels {
namespace {

float dot_f32(const float* a, const float* b, std::size_t n) {
  float32x4_t acc0 = vdupq_n_f32(0.0f);
  float32x4_t acc1 = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = vfmaq_f32(acc0, vld1q_f32(a + i), vld1q_f32(b + i));
    acc1 = vfmaq_f32(acc1, vld1q_f32(a + i + 4), vld1q_f32(b + i + 4));
  }
  float res = vaddvq_f32(vaddq_f32(acc0, acc1));
  for (; i < n; ++i) res += a[i] * b[i];
  return res;
}

void axpy_f32(float* y, float alpha, const float* x, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    vst1q_f32(y + i, vfmaq_n_f32(vld1q_f32(y + i), vld1q_f32(x + i), alpha));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void quantize_row_q8_0(const float* x, BlockQ8_0* out, std::size_t n) {
  const std::size_t nb = n / kQ8BlockSize;
  for (std::size_t b = 0; b < nb; ++b) {
    const float* src = x + b * kQ8BlockSize;
    float32x4_t v[8];
    float32x4_t m = vdupq_n_f32(0.0f);
    for (int j = 0; j < 8; ++j) {
      v[j] = vld1q_f32(src + 4 * j);
      m = vmaxq_f32(m, vabsq_f32(v[j]));
    }
    const float amax = vmaxvq_f32(m);
    BlockQ8_0& blk = out[b];
    if (amax == 0.0f) {
      blk.scale = fp32_to_fp16(0.0f);
      vst1q_s8(blk.codes, vdupq_n_s8(0));
      vst1q_s8(blk.codes + 16, vdupq_n_s8(0));
      continue;
    }
    const float d = amax / 127.0f;
    blk.scale = fp32_to_fp16(d);
    const float32x4_t vd = vdupq_n_f32(d);
    for (int j = 0; j < 8; ++j) {
      // vcvtaq rounds to nearest with ties away from zero.
      int32x4_t q = vcvtaq_s32_f32(vdivq_f32(v[j], vd));
      q = vminq_s32(vmaxq_s32(q, vdupq_n_s32(-127)), vdupq_n_s32(127));
      const int16x4_t q16 = vmovn_s32(q);
      const int8x8_t q8 = vmovn_s16(vcombine_s16(q16, q16));
      blk.codes[4 * j + 0] = vget_lane_s8(q8, 0);
      blk.codes[4 * j + 1] = vget_lane_s8(q8, 1);
      blk.codes[4 * j + 2] = vget_lane_s8(q8, 2);
      blk.codes[4 * j + 3] = vget_lane_s8(q8, 3);
    }
  }
}

void dequantize_row_q8_0(const BlockQ8_0* in, float* out, std::size_t n) {
  const std::size_t nb = n / kQ8BlockSize;
  for (std::size_t b = 0; b < nb; ++b) {
    const float d = fp16_to_fp32(in[b].scale);
    float* dst = out + b * kQ8BlockSize;
    for (int h = 0; h < 2; ++h) {
      const int8x16_t q = vld1q_s8(in[b].codes + 16 * h);
      const int16x8_t lo = vmovl_s8(vget_low_s8(q));
      const int16x8_t hi = vmovl_s8(vget_high_s8(q));
      vst1q_f32(dst + 16 * h + 0, vmulq_n_f32(vcvtq_f32_s32(vmovl_s16(vget_low_s16(lo))), d));
      vst1q_f32(dst + 16 * h + 4, vmulq_n_f32(vcvtq_f32_s32(vmovl_s16(vget_high_s16(lo))), d));
      vst1q_f32(dst + 16 * h + 8, vmulq_n_f32(vcvtq_f32_s32(vmovl_s16(vget_low_s16(hi))), d));
      vst1q_f32(dst + 16 * h + 12, vmulq_n_f32(vcvtq_f32_s32(vmovl_s16(vget_high_s16(hi))), d));
    }
  }
}

float dot_q8_0(const BlockQ8_0* a, const BlockQ8_0* b, std::size_t n_blocks) {
  float32x4_t acc = vdupq_n_f32(0.0f);
  for (std::size_t k = 0; k < n_blocks; ++k) {
    int32x4_t isum = vdupq_n_s32(0);
    for (int h = 0; h < 2; ++h) {
      const int8x16_t qa = vld1q_s8(a[k].codes + 16 * h);
      const int8x16_t qb = vld1q_s8(b[k].codes + 16 * h);
      isum = vpadalq_s16(isum, vmull_s8(vget_low_s8(qa), vget_low_s8(qb)));
      isum = vpadalq_s16(isum, vmull_s8(vget_high_s8(qa), vget_high_s8(qb)));
    }
    const float d = fp16_to_fp32(a[k].scale) * fp16_to_fp32(b[k].scale);
    acc = vfmaq_n_f32(acc, vcvtq_f32_s32(isum), d);
  }
  return vaddvq_f32(acc);
}

}  // namespace

namespace detail {
const KernelTable* neon_compiled() noexcept {
  static const KernelTable table{Backend::Neon,      "neon",
                                 &dot_f32,           &axpy_f32,
                                 &quantize_row_q8_0, &dequantize_row_q8_0,
                                 &dot_q8_0};
  return &table;
}
}  // namespace detail

}  // namespace lexlm::kernels
