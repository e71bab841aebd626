// Built with -mavx2 -mfma -mf16c. Only reached after a runtime CPU check.

#include <immintrin.h>

#include <cstdint>

#include "kernels_impl.hpp"

namespace lexlm::kernels {
namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_movehdup_ps(lo));
  return _mm_cvtss_f32(lo);
}

inline float half_to_float(std::uint16_t h) { return _cvtsh_ss(h); }

float dot_f32(const float* a, const float* b, std::size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  __m256 acc2 = _mm256_setzero_ps();
  __m256 acc3 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 32 <= n; i += 32) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
    acc2 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 16), _mm256_loadu_ps(b + i + 16), acc2);
    acc3 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 24), _mm256_loadu_ps(b + i + 24), acc3);
  }
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
  }
  float res = hsum(_mm256_add_ps(_mm256_add_ps(acc0, acc1), _mm256_add_ps(acc2, acc3)));
  for (; i < n; ++i) res += a[i] * b[i];
  return res;
}

void axpy_f32(float* y, float alpha, const float* x, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    _mm256_storeu_ps(y + i + 8,
                     _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i + 8), _mm256_loadu_ps(y + i + 8)));
  }
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// Round half away from zero, bit-identical to the scalar round_away().
inline __m256 round_away(__m256 q) {
  const __m256 sign_mask = _mm256_set1_ps(-0.0f);
  const __m256 t = _mm256_round_ps(q, _MM_FROUND_TO_ZERO | _MM_FROUND_NO_EXC);
  const __m256 frac = _mm256_andnot_ps(sign_mask, _mm256_sub_ps(q, t));
  const __m256 bump = _mm256_and_ps(_mm256_cmp_ps(frac, _mm256_set1_ps(0.5f), _CMP_GE_OQ),
                                    _mm256_or_ps(_mm256_set1_ps(1.0f), _mm256_and_ps(q, sign_mask)));
  return _mm256_add_ps(t, bump);
}

void quantize_row_q8_0(const float* x, BlockQ8_0* out, std::size_t n) {
  const __m256 sign_mask = _mm256_set1_ps(-0.0f);
  const __m256 lim = _mm256_set1_ps(127.0f);
  const std::size_t nb = n / kQ8BlockSize;
  for (std::size_t b = 0; b < nb; ++b) {
    const float* src = x + b * kQ8BlockSize;
    __m256 v0 = _mm256_loadu_ps(src);
    __m256 v1 = _mm256_loadu_ps(src + 8);
    __m256 v2 = _mm256_loadu_ps(src + 16);
    __m256 v3 = _mm256_loadu_ps(src + 24);

    __m256 m = _mm256_andnot_ps(sign_mask, v0);
    m = _mm256_max_ps(m, _mm256_andnot_ps(sign_mask, v1));
    m = _mm256_max_ps(m, _mm256_andnot_ps(sign_mask, v2));
    m = _mm256_max_ps(m, _mm256_andnot_ps(sign_mask, v3));
    __m128 m4 = _mm_max_ps(_mm256_extractf128_ps(m, 1), _mm256_castps256_ps128(m));
    m4 = _mm_max_ps(m4, _mm_movehl_ps(m4, m4));
    m4 = _mm_max_ss(m4, _mm_movehdup_ps(m4));
    const float amax = _mm_cvtss_f32(m4);

    BlockQ8_0& blk = out[b];
    if (amax == 0.0f) {
      blk.scale = fp32_to_fp16(0.0f);
      _mm256_storeu_si256(reinterpret_cast<__m256i*>(blk.codes), _mm256_setzero_si256());
      continue;
    }
    const float d = amax / 127.0f;
    blk.scale = static_cast<std::uint16_t>(_cvtss_sh(d, _MM_FROUND_TO_NEAREST_INT));

    const __m256 vd = _mm256_set1_ps(d);
    const __m256 nlim = _mm256_set1_ps(-127.0f);
    v0 = _mm256_min_ps(_mm256_max_ps(round_away(_mm256_div_ps(v0, vd)), nlim), lim);
    v1 = _mm256_min_ps(_mm256_max_ps(round_away(_mm256_div_ps(v1, vd)), nlim), lim);
    v2 = _mm256_min_ps(_mm256_max_ps(round_away(_mm256_div_ps(v2, vd)), nlim), lim);
    v3 = _mm256_min_ps(_mm256_max_ps(round_away(_mm256_div_ps(v3, vd)), nlim), lim);

    __m256i i0 = _mm256_cvttps_epi32(v0);
    __m256i i1 = _mm256_cvttps_epi32(v1);
    __m256i i2 = _mm256_cvttps_epi32(v2);
    __m256i i3 = _mm256_cvttps_epi32(v3);
    i0 = _mm256_packs_epi32(i0, i1);
    i2 = _mm256_packs_epi32(i2, i3);
    i0 = _mm256_packs_epi16(i0, i2);
    i0 = _mm256_permutevar8x32_epi32(i0, _mm256_setr_epi32(0, 4, 1, 5, 2, 6, 3, 7));
    _mm256_storeu_si256(reinterpret_cast<__m256i*>(blk.codes), i0);
  }
}

void dequantize_row_q8_0(const BlockQ8_0* in, float* out, std::size_t n) {
  const std::size_t nb = n / kQ8BlockSize;
  for (std::size_t b = 0; b < nb; ++b) {
    const __m256 d = _mm256_set1_ps(half_to_float(in[b].scale));
    const __m256i q = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(in[b].codes));
    const __m128i lo = _mm256_castsi256_si128(q);
    const __m128i hi = _mm256_extracti128_si256(q, 1);
    float* dst = out + b * kQ8BlockSize;
    _mm256_storeu_ps(dst, _mm256_mul_ps(d, _mm256_cvtepi32_ps(_mm256_cvtepi8_epi32(lo))));
    _mm256_storeu_ps(dst + 8, _mm256_mul_ps(d, _mm256_cvtepi32_ps(_mm256_cvtepi8_epi32(_mm_srli_si128(lo, 8)))));
    _mm256_storeu_ps(dst + 16, _mm256_mul_ps(d, _mm256_cvtepi32_ps(_mm256_cvtepi8_epi32(hi))));
    _mm256_storeu_ps(dst + 24, _mm256_mul_ps(d, _mm256_cvtepi32_ps(_mm256_cvtepi8_epi32(_mm_srli_si128(hi, 8)))));
  }
}

float dot_q8_0(const BlockQ8_0* a, const BlockQ8_0* b, std::size_t n_blocks) {
  const __m256i ones = _mm256_set1_epi16(1);
  __m256 acc = _mm256_setzero_ps();
  for (std::size_t k = 0; k < n_blocks; ++k) {
    const __m256 d = _mm256_set1_ps(half_to_float(a[k].scale) * half_to_float(b[k].scale));
    const __m256i qa = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(a[k].codes));
    const __m256i qb = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(b[k].codes));
    // |a| * (b * sign(a)): unsigned x signed multiply. Codes never hit -128,
    // so pairwise sums stay inside int16.
    const __m256i abs_a = _mm256_sign_epi8(qa, qa);
    const __m256i signed_b = _mm256_sign_epi8(qb, qa);
    const __m256i dot16 = _mm256_maddubs_epi16(abs_a, signed_b);
    const __m256i dot32 = _mm256_madd_epi16(dot16, ones);
    acc = _mm256_fmadd_ps(d, _mm256_cvtepi32_ps(dot32), acc);
  }
  return hsum(acc);
}

}  // namespace

namespace detail {
const KernelTable* avx2_compiled() noexcept {
  static const KernelTable table{Backend::Avx2,      "avx2",
                                 &dot_f32,           &axpy_f32,
                                 &quantize_row_q8_0, &dequantize_row_q8_0,
                                 &dot_q8_0};
  return &table;
}
}  // namespace detail

}  // namespace lexlm::kernels
