#include "test_util.hpp"

#include "spon/error.hpp"
#include "spon/kernels.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>

using namespace spon;
using namespace spon::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, std::mt19937_64& rng, float scale = 1.0f) {
    std::normal_distribution<float> nd(0.0f, scale);
    std::vector<float> v(n);
    for (float& x : v) x = nd(rng);
    return v;
}

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("scalar gemm is exact on small integers") {
    const std::vector<float> a = {1, 2, 3, 4, 5, 6};  // 2x3
    const std::vector<float> b = {7, 8, 9, 10, 11, 12};  // 3x2
    std::vector<float> c(4);
    scalar_table().gemm(2, 2, 3, a.data(), b.data(), c.data());
    CHECK(c == std::vector<float>{58, 64, 139, 154});
}

TEST_CASE("scalar threshold_mask follows the magnitude rule") {
    const std::vector<float> x = {0.2f, -0.6f, 0.05f, 0.1f, -0.1f, 0.0f, NAN};
    std::vector<float> out(x.size());
    std::vector<unsigned char> keep(x.size());
    const std::size_t masked = scalar_table().threshold_mask(x.data(), x.size(), 0.1f, out.data(), keep.data());
    CHECK(masked == 5);
    CHECK(out[0] == 0.2f);
    CHECK(out[1] == -0.6f);
    for (std::size_t i = 2; i < x.size(); ++i) {
        CHECK(out[i] == 0.0f);
        CHECK(!std::signbit(out[i]));
    }
    CHECK(keep == std::vector<unsigned char>{1, 1, 0, 0, 0, 0, 0});
}

TEST_CASE("backend selection") {
    const Backend before = backend();
    set_backend(Backend::Scalar);
    CHECK(active().backend == Backend::Scalar);
    if (avx2_table() && cpu_supports_avx2()) {
        set_backend(Backend::Avx2);
        CHECK(active().backend == Backend::Avx2);
    } else {
        CHECK_THROWS_AS(set_backend(Backend::Avx2), InputError);
    }
    set_backend(before);
    CHECK(backend_name(Backend::Scalar) == "scalar");
}

TEST_CASE("AVX2 variants agree with the scalar reference") {
    const KernelTable* simd = avx2_table();
    if (!simd || !cpu_supports_avx2()) {
        MESSAGE("AVX2 variant unavailable; skipping equivalence checks");
        return;
    }
    const KernelTable& ref = scalar_table();
    std::mt19937_64 rng(17);

    SUBCASE("gemm is bit-identical") {
        std::uniform_int_distribution<std::size_t> dim(1, 70);
        for (int trial = 0; trial < 60; ++trial) {
            const std::size_t m = dim(rng), n = dim(rng), k = dim(rng);
            const auto a = random_vec(m * k, rng), b = random_vec(k * n, rng);
            std::vector<float> c1(m * n), c2(m * n);
            ref.gemm(m, n, k, a.data(), b.data(), c1.data());
            simd->gemm(m, n, k, a.data(), b.data(), c2.data());
            REQUIRE(same_bits(c1, c2));
        }
    }
    SUBCASE("threshold_mask is bit-identical") {
        for (std::size_t n : {1u, 7u, 8u, 9u, 31u, 1000u}) {
            auto x = random_vec(n, rng);
            if (n > 3) {
                x[1] = 0.5f;
                x[2] = -0.5f;
                x[3] = NAN;
            }
            std::vector<float> o1(n), o2(n);
            std::vector<unsigned char> k1(n), k2(n);
            const std::size_t m1 = ref.threshold_mask(x.data(), n, 0.5f, o1.data(), k1.data());
            const std::size_t m2 = simd->threshold_mask(x.data(), n, 0.5f, o2.data(), k2.data());
            CHECK(m1 == m2);
            CHECK(same_bits(o1, o2));
            CHECK(k1 == k2);
        }
    }
    SUBCASE("add is bit-identical") {
        const auto a = random_vec(1001, rng), b = random_vec(1001, rng);
        std::vector<float> o1(1001), o2(1001);
        ref.add(a.data(), b.data(), o1.data(), 1001);
        simd->add(a.data(), b.data(), o2.data(), 1001);
        CHECK(same_bits(o1, o2));
    }
    SUBCASE("adam_update is bit-identical") {
        auto p1 = random_vec(333, rng), m1 = random_vec(333, rng, 0.1f), v1 = random_vec(333, rng, 0.1f);
        for (float& v : v1) v = std::fabs(v);
        auto p2 = p1, m2 = m1, v2 = v1;
        const auto g = random_vec(333, rng);
        for (int step = 1; step <= 5; ++step) {
            const float bc1 = 1.0f - std::pow(0.9f, static_cast<float>(step));
            const float bc2 = 1.0f - std::pow(0.999f, static_cast<float>(step));
            ref.adam_update(p1.data(), g.data(), m1.data(), v1.data(), 333, 1e-3f, 0.9f, 0.999f, 1e-8f, bc1, bc2);
            simd->adam_update(p2.data(), g.data(), m2.data(), v2.data(), 333, 1e-3f, 0.9f, 0.999f, 1e-8f, bc1, bc2);
        }
        CHECK(same_bits(p1, p2));
        CHECK(same_bits(m1, m2));
        CHECK(same_bits(v1, v2));
    }
    SUBCASE("sum_squares agrees to double rounding") {
        for (std::size_t n : {1u, 5u, 64u, 1027u}) {
            const auto x = random_vec(n, rng, 3.0f);
            const double a = ref.sum_squares(x.data(), n), b = simd->sum_squares(x.data(), n);
            CHECK(std::fabs(a - b) <= 1e-12 * std::max(1.0, a));
        }
    }
}
