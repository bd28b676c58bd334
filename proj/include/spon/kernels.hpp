#pragma once

#include <cstddef>
#include <string_view>

// Inner-loop arithmetic kernels. Each kernel has a portable scalar reference
// and, on x86-64, an AVX2/FMA variant; the variant is chosen once at startup
// from CPUID (override with SPON_KERNELS=scalar|avx2) and can be switched by
// tests. Variants are equivalence-tested against the scalar reference.
//
// gemm, threshold_mask and adam_update produce bit-identical results across
// variants: gemm accumulates float products in double (the product of two
// floats is exact in double, so FMA and mul+add agree) in the same k order,
// and the others are pure lane-wise IEEE operations without contraction.
// sum_squares reassociates its double accumulation and is only close.
namespace spon::kernels {

enum class Backend { Scalar, Avx2 };

struct KernelTable {
    Backend backend;

    // c[m x n] = a[m x k] * b[k x n], all row-major, double accumulation.
    void (*gemm)(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c);

    // out[i] = |x[i]| > tau ? x[i] : +0; keep[i] = 1 where kept. Returns the
    // number of masked entries (|x| <= tau, NaN included). `keep` may be null.
    std::size_t (*threshold_mask)(const float* x, std::size_t n, float tau, float* out, unsigned char* keep);

    double (*sum_squares)(const float* x, std::size_t n);

    // out[i] = a[i] + b[i]
    void (*add)(const float* a, const float* b, float* out, std::size_t n);

    // Adam moment update and parameter step with bias corrections bc1, bc2.
    void (*adam_update)(float* param, const float* grad, float* m, float* v, std::size_t n, float lr,
                        float beta1, float beta2, float eps, float bc1, float bc2);
};

const KernelTable& scalar_table();
// Null when the variant was not compiled in.
const KernelTable* avx2_table();

bool cpu_supports_avx2();

// The active table.
const KernelTable& active();
// Switch the active table. Throws InputError if the backend is unavailable.
void set_backend(Backend b);
Backend backend();
std::string_view backend_name(Backend b);

}  // namespace spon::kernels
