#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "lexlm/kernels.hpp"
#include "oracles.hpp"

using namespace lexlm::kernels;

namespace {

std::vector<const KernelTable*> simd_tables() {
  std::vector<const KernelTable*> out;
  if (auto* t = avx2_table()) out.push_back(t);
  if (auto* t = neon_table()) out.push_back(t);
  return out;
}

std::vector<float> random_vec(std::size_t n, std::uint64_t seed, float lo = -1, float hi = 1) {
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<float> d(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = d(g);
  return v;
}

}  // namespace

TEST_CASE("fp16 decode is exact for every half") {
  for (std::uint32_t h = 0; h < 0x10000; ++h) {
    const float ref = oracle::half_to_float(std::uint16_t(h));
    const float got = fp16_to_fp32(std::uint16_t(h));
    if (std::isnan(ref)) {
      CHECK(std::isnan(got));
    } else {
      REQUIRE(std::memcmp(&ref, &got, 4) == 0);
    }
  }
}

TEST_CASE("fp16 encode rounds to nearest even") {
  // Every half value and every midpoint between neighbours.
  for (std::uint32_t h = 0; h < 0x7c00; ++h) {
    const float v = oracle::half_to_float(std::uint16_t(h));
    REQUIRE(fp32_to_fp16(v) == h);
    REQUIRE(fp32_to_fp16(-v) == (h | 0x8000));
    if (h + 1 < 0x7c00) {
      const float next = oracle::half_to_float(std::uint16_t(h + 1));
      const float mid = (v + next) / 2;  // exact in fp32
      const std::uint16_t even = (h & 1) ? std::uint16_t(h + 1) : std::uint16_t(h);
      REQUIRE(fp32_to_fp16(mid) == even);
      REQUIRE(fp32_to_fp16(std::nextafter(mid, 0.0f)) == h);
      REQUIRE(fp32_to_fp16(std::nextafter(mid, 1e9f)) == h + 1);
    }
  }
  CHECK(fp32_to_fp16(1e6f) == 0x7c00);
  CHECK(std::isnan(fp16_to_fp32(fp32_to_fp16(NAN))));
}

TEST_CASE("round_away") {
  CHECK(round_away(0.5f) == 1.0f);
  CHECK(round_away(-0.5f) == -1.0f);
  CHECK(round_away(1.5f) == 2.0f);
  CHECK(round_away(2.5f) == 3.0f);
  CHECK(round_away(-2.5f) == -3.0f);
  CHECK(round_away(0.49999997f) == 0.0f);
  CHECK(round_away(126.5f) == 127.0f);
}

TEST_CASE("backend selection") {
  CHECK(parse_backend("scalar") == Backend::Scalar);
  CHECK(parse_backend("avx2") == Backend::Avx2);
  CHECK(!parse_backend("sse9").has_value());
  set_deterministic(true);
  CHECK(active().backend == Backend::Scalar);
  set_deterministic(false);
  CHECK(&active() == &best_available());
}

TEST_CASE("SIMD kernels match the scalar reference") {
  const auto& ref = scalar_table();
  const auto tables = simd_tables();
  if (tables.empty()) MESSAGE("no SIMD backend on this machine; comparing scalar only");
  for (const KernelTable* t : tables) {
    CAPTURE(t->name);
    for (std::size_t n : {0u, 1u, 7u, 8u, 31u, 32u, 33u, 100u, 1024u}) {
      const auto a = random_vec(n, 1 + n), b = random_vec(n, 2 + n);
      const float r = ref.dot_f32(a.data(), b.data(), n);
      const float s = t->dot_f32(a.data(), b.data(), n);
      CHECK(std::fabs(r - s) <= 1e-5f * (1 + std::sqrt(float(n))));

      auto y1 = random_vec(n, 3 + n), y2 = y1;
      ref.axpy_f32(y1.data(), 0.37f, a.data(), n);
      t->axpy_f32(y2.data(), 0.37f, a.data(), n);
      for (std::size_t i = 0; i < n; ++i) CHECK(std::fabs(y1[i] - y2[i]) <= 1e-6f);
    }
    // Quantization must be bit-identical, including ties and edge magnitudes.
    for (int trial = 0; trial < 2000; ++trial) {
      auto x = random_vec(64, 100 + trial, -10, 10);
      if (trial % 4 == 1) {
        for (auto& v : x) v = std::round(v * 2) / 2;  // many exact halves
      } else if (trial % 4 == 2) {
        for (std::size_t i = 0; i < 32; ++i) x[i] = 0;  // zero block
      } else if (trial % 4 == 3) {
        for (auto& v : x) v *= 1e-6f;  // subnormal scales
      }
      BlockQ8_0 qa[2], qb[2];
      ref.quantize_row_q8_0(x.data(), qa, 64);
      t->quantize_row_q8_0(x.data(), qb, 64);
      REQUIRE(std::memcmp(qa, qb, sizeof qa) == 0);

      float da[64], db[64];
      ref.dequantize_row_q8_0(qa, da, 64);
      t->dequantize_row_q8_0(qa, db, 64);
      REQUIRE(std::memcmp(da, db, sizeof da) == 0);

      auto z = random_vec(64, 5000 + trial, -10, 10);
      BlockQ8_0 qz[2];
      ref.quantize_row_q8_0(z.data(), qz, 64);
      const float d1 = ref.dot_q8_0(qa, qz, 2), d2 = t->dot_q8_0(qa, qz, 2);
      CHECK(std::fabs(d1 - d2) <= 1e-4f * (1 + std::fabs(d1)));
    }
  }
}

TEST_CASE("scalar quantizer matches the reference block quantizer") {
  for (int trial = 0; trial < 5000; ++trial) {
    const auto x = random_vec(32, 9000 + trial, -10, 10);
    BlockQ8_0 q;
    scalar_table().quantize_row_q8_0(x.data(), &q, 32);
    const auto r = oracle::quantize_block(x.data());
    REQUIRE(fp16_to_fp32(q.scale) == r.scale);
    for (int i = 0; i < 32; ++i) REQUIRE(q.codes[i] == r.codes[i]);
  }
}
