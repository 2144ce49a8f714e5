#pragma once

#include "vsdf/simd/kernels.hpp"

namespace vsdf::simd::detail {

// Defined in kernels_avx2.cpp when VSDF_HAVE_AVX2 is set, otherwise returns nullptr.
const KernelTable* avx2_table_or_null();

}  // namespace vsdf::simd::detail
