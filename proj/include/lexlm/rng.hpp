#pragma once

#include <cstdint>

namespace lexlm {

// Counter-based generator: the i-th draw of stream s is splitmix64(seed, s, i).
// Uses only integer arithmetic, so uniform streams are identical on every
// platform. Normals use Box-Muller through libm and may differ in the last ulp
// between C libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) noexcept;

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() noexcept;
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept;
  double normal(double mean, double stddev) noexcept;

  /// Independent generator derived from this one's seed and a stream id.
  Rng split(std::uint64_t stream) const noexcept;

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

}  // namespace lexlm
