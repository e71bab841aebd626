#include <atomic>
#include <cstdlib>
#include <string_view>

#include "kernels_impl.hpp"

namespace lexlm::kernels {

namespace detail {
#if !defined(LEXLM_HAVE_AVX2)
const KernelTable* avx2_compiled() noexcept { return nullptr; }
#endif
#if !defined(LEXLM_HAVE_NEON)
const KernelTable* neon_compiled() noexcept { return nullptr; }
#endif
}  // namespace detail

namespace {

bool cpu_has_avx2() noexcept {
#if defined(LEXLM_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma") &&
         __builtin_cpu_supports("f16c");
#else
  return false;
#endif
}

const KernelTable* detect_best() noexcept {
  if (const char* env = std::getenv("LEXLM_BACKEND")) {
    if (auto b = parse_backend(env)) {
      if (const KernelTable* t = table_for(*b)) return t;
    }
  }
  if (const KernelTable* t = avx2_table()) return t;
  if (const KernelTable* t = neon_table()) return t;
  return &scalar_table();
}

std::atomic<const KernelTable*> g_active{nullptr};
std::atomic<bool> g_deterministic{false};

}  // namespace

const KernelTable* avx2_table() noexcept {
  static const bool ok = cpu_has_avx2();
  return ok ? detail::avx2_compiled() : nullptr;
}

// Advanced SIMD is mandatory on AArch64, so no runtime probe is needed.
const KernelTable* neon_table() noexcept { return detail::neon_compiled(); }

const KernelTable* table_for(Backend b) noexcept {
  switch (b) {
    case Backend::Scalar: return &scalar_table();
    case Backend::Avx2: return avx2_table();
    case Backend::Neon: return neon_table();
  }
  return nullptr;
}

const KernelTable& best_available() noexcept {
  static const KernelTable* best = detect_best();
  return *best;
}

const KernelTable& active() noexcept {
  const KernelTable* t = g_active.load(std::memory_order_acquire);
  if (t == nullptr) {
    t = g_deterministic.load() ? &scalar_table() : &best_available();
    g_active.store(t, std::memory_order_release);
  }
  return *t;
}

bool select(Backend b) noexcept {
  const KernelTable* t = table_for(b);
  if (t == nullptr) return false;
  g_active.store(t, std::memory_order_release);
  return true;
}

void set_deterministic(bool on) noexcept {
  g_deterministic.store(on);
  g_active.store(on ? &scalar_table() : &best_available(), std::memory_order_release);
}

bool deterministic() noexcept { return g_deterministic.load(); }

std::optional<Backend> parse_backend(std::string_view name) noexcept {
  if (name == "scalar") return Backend::Scalar;
  if (name == "avx2") return Backend::Avx2;
  if (name == "neon") return Backend::Neon;
  return std::nullopt;
}

}  // namespace lexlm::kernels
