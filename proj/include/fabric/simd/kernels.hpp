#pragma once

// Dense float32 kernels used by the substrate. Every kernel has a scalar
// reference implementation and, where the CPU supports it, an AVX2/FMA
// variant. The active table is chosen once at first use; FABRIC_SIMD=scalar
// in the environment forces the reference path.

#include <cstddef>
#include <string_view>

namespace fabric::simd {

enum class Isa { scalar, avx2 };

enum class Trans { no, yes };

// C (m x n) = op(A) (m x k) * op(B) (k x n), or C += ... when accumulate is set.
// All matrices are row-major; lda/ldb/ldc are row strides of the stored arrays.
using GemmFn = void (*)(Trans ta, Trans tb, int m, int n, int k, const float* a, int lda,
                        const float* b, int ldb, float* c, int ldc, bool accumulate);
using DotFn = float (*)(const float* x, const float* y, std::size_t n);
// y += alpha * x
using AxpyFn = void (*)(float alpha, const float* x, float* y, std::size_t n);

struct KernelTable {
    Isa isa;
    GemmFn gemm;
    DotFn dot;
    AxpyFn axpy;
};

bool isa_available(Isa isa);
const KernelTable& kernels_for(Isa isa);
const KernelTable& active_kernels();
std::string_view isa_name(Isa isa);

inline void gemm(Trans ta, Trans tb, int m, int n, int k, const float* a, int lda, const float* b,
                 int ldb, float* c, int ldc, bool accumulate = false) {
    active_kernels().gemm(ta, tb, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

inline float dot(const float* x, const float* y, std::size_t n) { return active_kernels().dot(x, y, n); }

inline void axpy(float alpha, const float* x, float* y, std::size_t n) {
    active_kernels().axpy(alpha, x, y, n);
}

namespace detail {
void gemm_scalar(Trans ta, Trans tb, int m, int n, int k, const float* a, int lda, const float* b,
                 int ldb, float* c, int ldc, bool accumulate);
float dot_scalar(const float* x, const float* y, std::size_t n);
void axpy_scalar(float alpha, const float* x, float* y, std::size_t n);

#if defined(FABRIC_HAVE_AVX2)
void gemm_avx2(Trans ta, Trans tb, int m, int n, int k, const float* a, int lda, const float* b,
               int ldb, float* c, int ldc, bool accumulate);
float dot_avx2(const float* x, const float* y, std::size_t n);
void axpy_avx2(float alpha, const float* x, float* y, std::size_t n);
#endif
}  // namespace detail

}  // namespace fabric::simd
