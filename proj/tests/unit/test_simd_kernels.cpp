#include <doctest.h>

#include <random>
#include <vector>

#include "fabric/simd/kernels.hpp"

using namespace fabric::simd;

namespace {

std::vector<float> randn(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<float> d;
    std::vector<float> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

double max_rel_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max(1.0, static_cast<double>(std::abs(b[i])));
        worst = std::max(worst, std::abs(static_cast<double>(a[i]) - b[i]) / denom);
    }
    return worst;
}

}  // namespace

TEST_CASE("scalar kernels are always available") {
    CHECK(isa_available(Isa::scalar));
    CHECK(kernels_for(Isa::scalar).isa == Isa::scalar);
    MESSAGE("active kernel set: " << isa_name(active_kernels().isa));
}

TEST_CASE("gemm variants agree with the scalar reference for every transpose combination") {
    if (!isa_available(Isa::avx2)) {
        MESSAGE("AVX2 not available; equivalence test skipped");
        return;
    }
    const auto& ref = kernels_for(Isa::scalar);
    const auto& fast = kernels_for(Isa::avx2);
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> dim(1, 300);
    for (int trial = 0; trial < 40; ++trial) {
        const int m = dim(rng) % 70 + 1, n = dim(rng), k = dim(rng);
        const Trans ta = (trial & 1) ? Trans::yes : Trans::no;
        const Trans tb = (trial & 2) ? Trans::yes : Trans::no;
        const bool acc = (trial & 4) != 0;
        auto a = randn(static_cast<std::size_t>(m) * k, rng);
        auto b = randn(static_cast<std::size_t>(k) * n, rng);
        auto c0 = randn(static_cast<std::size_t>(m) * n, rng);
        auto c1 = c0;
        const int lda = ta == Trans::no ? k : m;
        const int ldb = tb == Trans::no ? n : k;
        ref.gemm(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, c0.data(), n, acc);
        fast.gemm(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, c1.data(), n, acc);
        INFO("m=" << m << " n=" << n << " k=" << k);
        CHECK(max_rel_diff(c1, c0) < 1e-4);
    }
}

TEST_CASE("gemm handles strided sub-matrices and k = 0") {
    for (Isa isa : {Isa::scalar, Isa::avx2}) {
        if (!isa_available(isa)) continue;
        const auto& kt = kernels_for(isa);
        // 2x2 block of a 3x4 row-major array.
        std::vector<float> a{1, 2, 9, 9, 3, 4, 9, 9, 9, 9, 9, 9};
        std::vector<float> b{5, 6, 7, 8};
        std::vector<float> c(6, -1.0f);
        kt.gemm(Trans::no, Trans::no, 2, 2, 2, a.data(), 4, b.data(), 2, c.data(), 3, false);
        CHECK(c[0] == 19.0f);
        CHECK(c[1] == 22.0f);
        CHECK(c[2] == -1.0f);
        CHECK(c[3] == 43.0f);
        CHECK(c[4] == 50.0f);
        std::vector<float> z(4, 5.0f);
        kt.gemm(Trans::no, Trans::no, 2, 2, 0, a.data(), 1, b.data(), 2, z.data(), 2, false);
        CHECK(z == std::vector<float>(4, 0.0f));
    }
}

TEST_CASE("gemm column results do not depend on the number of columns") {
    // Per-sample outputs must not change with batch composition.
    std::mt19937_64 rng(3);
    const int m = 13, k = 37;
    auto a = randn(static_cast<std::size_t>(m) * k, rng);
    auto b = randn(static_cast<std::size_t>(k) * 100, rng);
    std::vector<float> wide(static_cast<std::size_t>(m) * 100), narrow(static_cast<std::size_t>(m) * 7);
    gemm(Trans::no, Trans::no, m, 100, k, a.data(), k, b.data(), 100, wide.data(), 100);
    gemm(Trans::no, Trans::no, m, 7, k, a.data(), k, b.data() + 40, 100, narrow.data(), 7);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < 7; ++j) CHECK(narrow[static_cast<std::size_t>(i) * 7 + j] == wide[static_cast<std::size_t>(i) * 100 + 40 + j]);
    }
}

TEST_CASE("dot and axpy variants agree with the scalar reference") {
    std::mt19937_64 rng(11);
    for (std::size_t n : {0u, 1u, 7u, 8u, 15u, 16u, 17u, 100u, 1000u}) {
        auto x = randn(n, rng);
        auto y = randn(n, rng);
        const float r = kernels_for(Isa::scalar).dot(x.data(), y.data(), n);
        auto y0 = y;
        kernels_for(Isa::scalar).axpy(0.37f, x.data(), y0.data(), n);
        if (isa_available(Isa::avx2)) {
            const float f = kernels_for(Isa::avx2).dot(x.data(), y.data(), n);
            CHECK(std::abs(f - r) <= 1e-4f * std::max(1.0f, std::abs(r)) + 1e-4f);
            auto y1 = y;
            kernels_for(Isa::avx2).axpy(0.37f, x.data(), y1.data(), n);
            CHECK(max_rel_diff(y1, y0) < 1e-6);
        }
    }
}
