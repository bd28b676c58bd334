#include "test_util.hpp"

#include "spon/error.hpp"
#include "spon/tensor.hpp"

#include <doctest.h>

#include <cmath>

using namespace spon;
using spon::test::random_tensor;

namespace {

Tensor triple_loop(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += static_cast<double>(a.at(i, p)) * b.at(p, j);
            c.at(i, j) = static_cast<float>(s);
        }
    return c;
}

}  // namespace

TEST_CASE("tensor construction checks element count") {
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), DimensionError);
    const Tensor t({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    CHECK_THROWS_AS(t.reshaped({4, 2}), DimensionError);
}

TEST_CASE("matmul hand cases") {
    const Tensor a({2, 2}, {1, 2, 3, 4});
    const Tensor id({2, 2}, {1, 0, 0, 1});
    CHECK(matmul(a, id).bit_equal(a));
    const Tensor r = matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4}));
    CHECK(r.shape() == Shape{1, 1});
    CHECK(r[0] == 11.0f);
}

TEST_CASE("matmul matches the triple-loop oracle") {
    std::mt19937_64 rng(11);
    {
        const Tensor a = random_tensor({5, 7}, rng), b = random_tensor({7, 3}, rng);
        CHECK(test::max_abs_diff(matmul(a, b), triple_loop(a, b)) <= 1e-6);
    }
    std::uniform_int_distribution<std::size_t> dim(1, 16);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
        const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
        REQUIRE(test::max_abs_diff(matmul(a, b), triple_loop(a, b)) <= 1e-6);
    }
}

TEST_CASE("matmul rejects mismatched shapes") {
    CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
    CHECK_THROWS_AS(matmul(Tensor({6}), Tensor({6, 1})), DimensionError);
}

TEST_CASE("softmax examples") {
    const Tensor u = softmax(Tensor({3}, {0, 0, 0}), 0);
    for (float v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-7));
    const Tensor big = softmax(Tensor({2}, {1000, 1000}), 0);
    CHECK(big[0] == 0.5f);
    CHECK(big[1] == 0.5f);

    const Tensor s = softmax(Tensor({3}, {1, 2, 3}), 0);
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int i = 0; i < 3; ++i) CHECK(std::fabs(s[i] - std::exp(i + 1.0) / z) <= 1e-6);
}

TEST_CASE("softmax rows sum to one and ignore row shifts") {
    std::mt19937_64 rng(5);
    const Tensor x = random_tensor({16, 9}, rng, 3.0f);
    const Tensor p = softmax(x, 1);
    Tensor shifted = x;
    for (std::size_t r = 0; r < 16; ++r)
        for (std::size_t c = 0; c < 9; ++c) shifted.at(r, c) += static_cast<float>(r) * 7.25f;
    const Tensor q = softmax(shifted, 1);
    for (std::size_t r = 0; r < 16; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 9; ++c) {
            s += p.at(r, c);
            CHECK(p.at(r, c) > 0.0f);
            CHECK(p.at(r, c) < 1.0f);
        }
        CHECK(std::fabs(s - 1.0) <= 1e-6);
    }
    CHECK(test::max_abs_diff(p, q) <= 1e-6);
}

TEST_CASE("softmax along a leading axis") {
    const Tensor x({2, 2}, {0, 1, 0, 1});
    const Tensor p = softmax(x, 0);
    for (float v : p.data()) CHECK(v == 0.5f);
}

TEST_CASE("softmax rejects non-finite input") {
    CHECK_THROWS_AS(softmax(Tensor({2}, {1.0f, NAN}), 0), NumericError);
}

TEST_CASE("elementwise suite") {
    const Tensor r = relu(Tensor({3}, {-1, 0, 2}));
    CHECK(r.bit_equal(Tensor({3}, {0, 0, 2})));
    CHECK(silu(Tensor({1}, {0}))[0] == 0.0f);
    const float x = 1.7f;
    CHECK(silu(Tensor({1}, {x}))[0] == doctest::Approx(x / (1.0 + std::exp(-x))).epsilon(1e-6));

    const Tensor n = rms_norm(Tensor({1, 2}, {3, 4}), Tensor({2}, {1, 1}), 0.0f);
    CHECK(std::fabs(n[0] - 3.0 / std::sqrt(12.5)) <= 1e-6);
    CHECK(std::fabs(n[1] - 4.0 / std::sqrt(12.5)) <= 1e-6);
}

TEST_CASE("rms_norm output has unit rms times gain") {
    std::mt19937_64 rng(9);
    const Tensor x = random_tensor({8, 32}, rng, 4.0f);
    const Tensor g = Tensor::full({32}, 2.0f);
    const Tensor y = rms_norm(x, g, 1e-5f);
    for (std::size_t r = 0; r < 8; ++r) {
        double s = 0.0;
        for (float v : y.row(r)) s += static_cast<double>(v) * v;
        CHECK(std::sqrt(s / 32.0) == doctest::Approx(2.0).epsilon(1e-4));
    }
    CHECK_THROWS_AS(rms_norm(x, Tensor({31}), 1e-5f), DimensionError);
}

TEST_CASE("broadcasting is limited to row vectors and scalars") {
    const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(add(a, Tensor({3}, {1, 1, 1})).bit_equal(Tensor({2, 3}, {2, 3, 4, 5, 6, 7})));
    CHECK(add(a, Tensor({1, 3}, {0, 1, 0})).bit_equal(Tensor({2, 3}, {1, 3, 3, 4, 6, 6})));
    CHECK(mul(a, Tensor::scalar(2.0f)).bit_equal(Tensor({2, 3}, {2, 4, 6, 8, 10, 12})));
    CHECK_THROWS_AS(add(a, Tensor({2}, {1, 1})), DimensionError);
    CHECK_THROWS_AS(mul(a, Tensor({2, 1}, {1, 1})), DimensionError);
}

TEST_CASE("ops are deterministic") {
    std::mt19937_64 rng(2);
    const Tensor a = random_tensor({13, 29}, rng), b = random_tensor({29, 11}, rng);
    CHECK(matmul(a, b).bit_equal(matmul(a, b)));
    CHECK(softmax(a, 1).bit_equal(softmax(a, 1)));
    CHECK(rms_norm(a, Tensor::full({29}, 1.0f), 1e-5f).bit_equal(rms_norm(a, Tensor::full({29}, 1.0f), 1e-5f)));
}

TEST_CASE("require_finite flags NaN and Inf") {
    CHECK_NOTHROW(require_finite(Tensor({2}, {1, 2}), "x"));
    CHECK_THROWS_AS(require_finite(Tensor({2}, {1, INFINITY}), "x"), NumericError);
    CHECK(transpose(Tensor({2, 3}, {1, 2, 3, 4, 5, 6})).bit_equal(Tensor({3, 2}, {1, 4, 2, 5, 3, 6})));
}
