#pragma once

#include "spon/kernels.hpp"

#include <algorithm>

namespace spon::kernels {

#if defined(SPON_HAVE_AVX2)
const KernelTable& avx2_table_impl();
#endif

}  // namespace spon::kernels
