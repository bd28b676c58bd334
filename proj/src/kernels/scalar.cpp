#include "kernels_impl.hpp"

#include <cmath>
#include <vector>

// Reference kernels. This translation unit is compiled with
// -ffp-contract=off so that the arithmetic is exactly what is written.
namespace spon::kernels {

namespace {

void gemm(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    std::vector<double> acc(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const float* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const float* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
        }
        float* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<float>(acc[j]);
    }
}

std::size_t threshold_mask(const float* x, std::size_t n, float tau, float* out, unsigned char* keep) {
    std::size_t masked = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const bool k = std::fabs(x[i]) > tau;
        out[i] = k ? x[i] : 0.0f;
        if (keep) keep[i] = k ? 1 : 0;
        masked += k ? 0 : 1;
    }
    return masked;
}

double sum_squares(const float* x, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x[i];
        s += v * v;
    }
    return s;
}

void add(const float* a, const float* b, float* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void adam_update(float* param, const float* grad, float* m, float* v, std::size_t n, float lr, float beta1,
                 float beta2, float eps, float bc1, float bc2) {
    const float one_m_b1 = 1.0f - beta1;
    const float one_m_b2 = 1.0f - beta2;
    for (std::size_t i = 0; i < n; ++i) {
        const float g = grad[i];
        m[i] = beta1 * m[i] + one_m_b1 * g;
        v[i] = beta2 * v[i] + one_m_b2 * (g * g);
        const float mhat = m[i] / bc1;
        const float vhat = v[i] / bc2;
        param[i] = param[i] - lr * mhat / (std::sqrt(vhat) + eps);
    }
}

}  // namespace

const KernelTable& scalar_table() {
    static const KernelTable table{Backend::Scalar, &gemm, &threshold_mask, &sum_squares, &add, &adam_update};
    return table;
}

}  // namespace spon::kernels
