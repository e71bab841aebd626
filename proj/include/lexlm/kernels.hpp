#pragma once

// Data-parallel inner loops. Each backend provides the same five kernels; the
// scalar table is the reference every SIMD variant is tested against.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>

namespace lexlm::kernels {

inline constexpr std::size_t kQ8BlockSize = 32;

/// One Q8_0 block as laid out on disk: fp16 scale followed by 32 codes.
struct BlockQ8_0 {
  std::uint16_t scale;
  std::int8_t codes[kQ8BlockSize];
};
static_assert(sizeof(BlockQ8_0) == 34, "Q8_0 block must be 34 bytes");

enum class Backend { Scalar, Avx2, Neon };

struct KernelTable {
  Backend backend;
  const char* name;
  float (*dot_f32)(const float* a, const float* b, std::size_t n);
  /// y += alpha * x
  void (*axpy_f32)(float* y, float alpha, const float* x, std::size_t n);
  /// n must be a multiple of 32. Input must be finite.
  void (*quantize_row_q8_0)(const float* x, BlockQ8_0* out, std::size_t n);
  void (*dequantize_row_q8_0)(const BlockQ8_0* in, float* out, std::size_t n);
  /// Sum over blocks of scale_a * scale_b * (int32 dot of the codes).
  float (*dot_q8_0)(const BlockQ8_0* a, const BlockQ8_0* b, std::size_t n_blocks);
};

const KernelTable& scalar_table() noexcept;
/// Null when not compiled in or not supported by the running CPU.
const KernelTable* avx2_table() noexcept;
const KernelTable* neon_table() noexcept;
const KernelTable* table_for(Backend b) noexcept;

/// The table used by the tensor, quant and model code.
const KernelTable& active() noexcept;
/// Best table supported by this CPU, or the LEXLM_BACKEND override
/// ("scalar", "avx2", "neon") when set.
const KernelTable& best_available() noexcept;
/// Returns false (and leaves the selection unchanged) if unavailable.
bool select(Backend b) noexcept;

/// Deterministic mode pins the scalar table, giving sequential reduction
/// order independent of the CPU. Turning it off restores best_available().
void set_deterministic(bool on) noexcept;
bool deterministic() noexcept;

std::optional<Backend> parse_backend(std::string_view name) noexcept;

// IEEE-754 binary16 conversion, round-to-nearest-even.
std::uint16_t fp32_to_fp16(float f) noexcept;
float fp16_to_fp32(std::uint16_t h) noexcept;

/// Round half away from zero.
inline float round_away(float x) noexcept {
  const float t = std::trunc(x);
  const float frac = x - t;
  if (frac >= 0.5f) return t + 1.0f;
  if (frac <= -0.5f) return t - 1.0f;
  return t;
}

}  // namespace lexlm::kernels
