#pragma once

#include "lexlm/kernels.hpp"

namespace lexlm::kernels::detail {

// Compiled-in tables, before any CPU feature check. Null when the backend was
// not built for this target.
const KernelTable* avx2_compiled() noexcept;
const KernelTable* neon_compiled() noexcept;

}  // namespace lexlm::kernels::detail
