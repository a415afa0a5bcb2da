#include "fabric/simd/kernels.hpp"

namespace fabric::simd::detail {

void gemm_scalar(Trans ta, Trans tb, int m, int n, int k, const float* a, int lda, const float* b,
                 int ldb, float* c, int ldc, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        float* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
        if (!accumulate) {
            for (int j = 0; j < n; ++j) crow[j] = 0.0f;
        }
        for (int p = 0; p < k; ++p) {
            const float av = ta == Trans::no ? a[static_cast<std::ptrdiff_t>(i) * lda + p]
                                             : a[static_cast<std::ptrdiff_t>(p) * lda + i];
            if (tb == Trans::no) {
                const float* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            } else {
                for (int j = 0; j < n; ++j) crow[j] += av * b[static_cast<std::ptrdiff_t>(j) * ldb + p];
            }
        }
    }
}

float dot_scalar(const float* x, const float* y, std::size_t n) {
    float s = 0.0f;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

void axpy_scalar(float alpha, const float* x, float* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace fabric::simd::detail
