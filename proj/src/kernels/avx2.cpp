#include "kernels_impl.hpp"

#include <immintrin.h>

#include <cmath>
#include <cstdint>
#include <vector>

// AVX2/FMA variants. Compiled with -mavx2 -mfma -ffp-contract=off; only
// reached after a CPUID check.
namespace spon::kernels {

namespace {

inline __m256d lo_pd(__m256 v) { return _mm256_cvtps_pd(_mm256_castps256_ps128(v)); }
inline __m256d hi_pd(__m256 v) { return _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1)); }

// Two rows of C, 16 columns at a time, with the B conversion shared between
// rows. Every c[i][j] still sees its k products in increasing k order, so the
// result matches the scalar reference bit for bit.
void gemm(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    const std::size_t n16 = n - n % 16;
    const std::size_t n4 = n - n % 4;
    std::size_t i = 0;
    for (; i + 2 <= m; i += 2) {
        const float* a0 = a + i * k;
        const float* a1 = a0 + k;
        float* c0 = c + i * n;
        float* c1 = c0 + n;
        std::size_t j = 0;
        for (; j < n16; j += 16) {
            __m256d r00 = _mm256_setzero_pd(), r01 = _mm256_setzero_pd();
            __m256d r02 = _mm256_setzero_pd(), r03 = _mm256_setzero_pd();
            __m256d r10 = _mm256_setzero_pd(), r11 = _mm256_setzero_pd();
            __m256d r12 = _mm256_setzero_pd(), r13 = _mm256_setzero_pd();
            const float* bp = b + j;
            for (std::size_t p = 0; p < k; ++p, bp += n) {
                const __m256 bv0 = _mm256_loadu_ps(bp);
                const __m256 bv1 = _mm256_loadu_ps(bp + 8);
                const __m256d b0 = lo_pd(bv0), b1 = hi_pd(bv0), b2 = lo_pd(bv1), b3 = hi_pd(bv1);
                const __m256d x0 = _mm256_set1_pd(a0[p]);
                const __m256d x1 = _mm256_set1_pd(a1[p]);
                r00 = _mm256_fmadd_pd(x0, b0, r00);
                r01 = _mm256_fmadd_pd(x0, b1, r01);
                r02 = _mm256_fmadd_pd(x0, b2, r02);
                r03 = _mm256_fmadd_pd(x0, b3, r03);
                r10 = _mm256_fmadd_pd(x1, b0, r10);
                r11 = _mm256_fmadd_pd(x1, b1, r11);
                r12 = _mm256_fmadd_pd(x1, b2, r12);
                r13 = _mm256_fmadd_pd(x1, b3, r13);
            }
            _mm_storeu_ps(c0 + j, _mm256_cvtpd_ps(r00));
            _mm_storeu_ps(c0 + j + 4, _mm256_cvtpd_ps(r01));
            _mm_storeu_ps(c0 + j + 8, _mm256_cvtpd_ps(r02));
            _mm_storeu_ps(c0 + j + 12, _mm256_cvtpd_ps(r03));
            _mm_storeu_ps(c1 + j, _mm256_cvtpd_ps(r10));
            _mm_storeu_ps(c1 + j + 4, _mm256_cvtpd_ps(r11));
            _mm_storeu_ps(c1 + j + 8, _mm256_cvtpd_ps(r12));
            _mm_storeu_ps(c1 + j + 12, _mm256_cvtpd_ps(r13));
        }
        for (; j < n4; j += 4) {
            __m256d r0 = _mm256_setzero_pd(), r1 = _mm256_setzero_pd();
            const float* bp = b + j;
            for (std::size_t p = 0; p < k; ++p, bp += n) {
                const __m256d bv = _mm256_cvtps_pd(_mm_loadu_ps(bp));
                r0 = _mm256_fmadd_pd(_mm256_set1_pd(a0[p]), bv, r0);
                r1 = _mm256_fmadd_pd(_mm256_set1_pd(a1[p]), bv, r1);
            }
            _mm_storeu_ps(c0 + j, _mm256_cvtpd_ps(r0));
            _mm_storeu_ps(c1 + j, _mm256_cvtpd_ps(r1));
        }
        for (; j < n; ++j) {
            double s0 = 0.0, s1 = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                const double bv = b[p * n + j];
                s0 = std::fma(static_cast<double>(a0[p]), bv, s0);
                s1 = std::fma(static_cast<double>(a1[p]), bv, s1);
            }
            c0[j] = static_cast<float>(s0);
            c1[j] = static_cast<float>(s1);
        }
    }
    for (; i < m; ++i) {
        const float* a0 = a + i * k;
        float* c0 = c + i * n;
        std::size_t j = 0;
        for (; j < n4; j += 4) {
            __m256d r0 = _mm256_setzero_pd();
            const float* bp = b + j;
            for (std::size_t p = 0; p < k; ++p, bp += n)
                r0 = _mm256_fmadd_pd(_mm256_set1_pd(a0[p]), _mm256_cvtps_pd(_mm_loadu_ps(bp)), r0);
            _mm_storeu_ps(c0 + j, _mm256_cvtpd_ps(r0));
        }
        for (; j < n; ++j) {
            double s0 = 0.0;
            for (std::size_t p = 0; p < k; ++p)
                s0 = std::fma(static_cast<double>(a0[p]), static_cast<double>(b[p * n + j]), s0);
            c0[j] = static_cast<float>(s0);
        }
    }
}

std::size_t threshold_mask(const float* x, std::size_t n, float tau, float* out, unsigned char* keep) {
    const __m256 sign = _mm256_set1_ps(-0.0f);
    const __m256 t = _mm256_set1_ps(tau);
    std::size_t masked = 0;
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 v = _mm256_loadu_ps(x + i);
        const __m256 gt = _mm256_cmp_ps(_mm256_andnot_ps(sign, v), t, _CMP_GT_OQ);
        _mm256_storeu_ps(out + i, _mm256_and_ps(v, gt));
        const unsigned bits = static_cast<unsigned>(_mm256_movemask_ps(gt));
        masked += 8 - static_cast<std::size_t>(__builtin_popcount(bits));
        if (keep) {
            for (int l = 0; l < 8; ++l) keep[i + l] = static_cast<unsigned char>((bits >> l) & 1u);
        }
    }
    for (; i < n; ++i) {
        const bool k = std::fabs(x[i]) > tau;
        out[i] = k ? x[i] : 0.0f;
        if (keep) keep[i] = k ? 1 : 0;
        masked += k ? 0 : 1;
    }
    return masked;
}

double sum_squares(const float* x, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 v = _mm256_loadu_ps(x + i);
        const __m256d lo = lo_pd(v), hi = hi_pd(v);
        acc0 = _mm256_fmadd_pd(lo, lo, acc0);
        acc1 = _mm256_fmadd_pd(hi, hi, acc1);
    }
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, _mm256_add_pd(acc0, acc1));
    double s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (; i < n; ++i) {
        const double v = x[i];
        s += v * v;
    }
    return s;
}

void add(const float* a, const float* b, float* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void adam_update(float* param, const float* grad, float* m, float* v, std::size_t n, float lr, float beta1,
                 float beta2, float eps, float bc1, float bc2) {
    const __m256 vb1 = _mm256_set1_ps(beta1), vb2 = _mm256_set1_ps(beta2);
    const __m256 omb1 = _mm256_set1_ps(1.0f - beta1), omb2 = _mm256_set1_ps(1.0f - beta2);
    const __m256 vlr = _mm256_set1_ps(lr), veps = _mm256_set1_ps(eps);
    const __m256 vbc1 = _mm256_set1_ps(bc1), vbc2 = _mm256_set1_ps(bc2);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 g = _mm256_loadu_ps(grad + i);
        __m256 mi = _mm256_add_ps(_mm256_mul_ps(vb1, _mm256_loadu_ps(m + i)), _mm256_mul_ps(omb1, g));
        __m256 vi = _mm256_add_ps(_mm256_mul_ps(vb2, _mm256_loadu_ps(v + i)),
                                  _mm256_mul_ps(omb2, _mm256_mul_ps(g, g)));
        _mm256_storeu_ps(m + i, mi);
        _mm256_storeu_ps(v + i, vi);
        const __m256 mhat = _mm256_div_ps(mi, vbc1);
        const __m256 vhat = _mm256_div_ps(vi, vbc2);
        const __m256 step = _mm256_div_ps(_mm256_mul_ps(vlr, mhat), _mm256_add_ps(_mm256_sqrt_ps(vhat), veps));
        _mm256_storeu_ps(param + i, _mm256_sub_ps(_mm256_loadu_ps(param + i), step));
    }
    const float one_m_b1 = 1.0f - beta1;
    const float one_m_b2 = 1.0f - beta2;
    for (; i < n; ++i) {
        const float g = grad[i];
        m[i] = beta1 * m[i] + one_m_b1 * g;
        v[i] = beta2 * v[i] + one_m_b2 * (g * g);
        const float mhat = m[i] / bc1;
        const float vhat = v[i] / bc2;
        param[i] = param[i] - lr * mhat / (std::sqrt(vhat) + eps);
    }
}

}  // namespace

const KernelTable& avx2_table_impl() {
    static const KernelTable table{Backend::Avx2, &gemm, &threshold_mask, &sum_squares, &add, &adam_update};
    return table;
}

}  // namespace spon::kernels
