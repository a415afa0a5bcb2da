// Compiled with -mavx2 -mfma; only reached through the dispatch table after a
// runtime CPU check.

#include <immintrin.h>

#include <algorithm>
#include <cstring>
#include <vector>

#include "fabric/simd/kernels.hpp"

namespace fabric::simd::detail {

namespace {

constexpr int kMr = 6;
constexpr int kNr = 16;
constexpr int kKc = 256;
constexpr int kMc = 96;
constexpr int kNc = 2048;

struct PackBuffers {
    std::vector<float> a;
    std::vector<float> b;
};

PackBuffers& pack_buffers() {
    thread_local PackBuffers buffers;
    return buffers;
}

// Packs op(A)[i0:i0+mc, p0:p0+kc] into row slivers of kMr, zero padded.
void pack_a(Trans ta, const float* a, int lda, int i0, int mc, int p0, int kc, float* dst) {
    for (int ir = 0; ir < mc; ir += kMr) {
        const int rows = std::min(kMr, mc - ir);
        for (int p = 0; p < kc; ++p) {
            for (int r = 0; r < kMr; ++r) {
                float v = 0.0f;
                if (r < rows) {
                    const std::ptrdiff_t i = i0 + ir + r;
                    const std::ptrdiff_t pp = p0 + p;
                    v = ta == Trans::no ? a[i * lda + pp] : a[pp * lda + i];
                }
                *dst++ = v;
            }
        }
    }
}

// Packs op(B)[p0:p0+kc, j0:j0+nc] into column slivers of kNr, zero padded.
void pack_b(Trans tb, const float* b, int ldb, int p0, int kc, int j0, int nc, float* dst) {
    for (int jr = 0; jr < nc; jr += kNr) {
        const int cols = std::min(kNr, nc - jr);
        for (int p = 0; p < kc; ++p) {
            const std::ptrdiff_t pp = p0 + p;
            if (tb == Trans::no) {
                const float* src = b + pp * ldb + j0 + jr;
                if (cols == kNr) {
                    std::memcpy(dst, src, sizeof(float) * kNr);
                } else {
                    for (int c = 0; c < kNr; ++c) dst[c] = c < cols ? src[c] : 0.0f;
                }
            } else {
                for (int c = 0; c < kNr; ++c) {
                    const std::ptrdiff_t j = j0 + jr + c;
                    dst[c] = c < cols ? b[j * ldb + pp] : 0.0f;
                }
            }
            dst += kNr;
        }
    }
}

// 6x16 register tile. `load` selects C += vs C =.
void micro_kernel(int kc, const float* ap, const float* bp, float* c, int ldc, int rows, int cols,
                  bool load) {
    __m256 acc[kMr][2];
    alignas(32) float tile[kMr * kNr];
    const bool full = rows == kMr && cols == kNr;

    if (load) {
        if (full) {
#pragma GCC unroll 6
            for (int r = 0; r < kMr; ++r) {
                acc[r][0] = _mm256_loadu_ps(c + static_cast<std::ptrdiff_t>(r) * ldc);
                acc[r][1] = _mm256_loadu_ps(c + static_cast<std::ptrdiff_t>(r) * ldc + 8);
            }
        } else {
            for (int r = 0; r < kMr; ++r) {
                for (int j = 0; j < kNr; ++j) {
                    tile[r * kNr + j] =
                        (r < rows && j < cols) ? c[static_cast<std::ptrdiff_t>(r) * ldc + j] : 0.0f;
                }
                acc[r][0] = _mm256_load_ps(tile + r * kNr);
                acc[r][1] = _mm256_load_ps(tile + r * kNr + 8);
            }
        }
    } else {
#pragma GCC unroll 6
        for (int r = 0; r < kMr; ++r) {
            acc[r][0] = _mm256_setzero_ps();
            acc[r][1] = _mm256_setzero_ps();
        }
    }

    for (int p = 0; p < kc; ++p) {
        const __m256 b0 = _mm256_loadu_ps(bp);
        const __m256 b1 = _mm256_loadu_ps(bp + 8);
#pragma GCC unroll 6
        for (int r = 0; r < kMr; ++r) {
            const __m256 av = _mm256_broadcast_ss(ap + r);
            acc[r][0] = _mm256_fmadd_ps(av, b0, acc[r][0]);
            acc[r][1] = _mm256_fmadd_ps(av, b1, acc[r][1]);
        }
        ap += kMr;
        bp += kNr;
    }

    if (full) {
#pragma GCC unroll 6
        for (int r = 0; r < kMr; ++r) {
            _mm256_storeu_ps(c + static_cast<std::ptrdiff_t>(r) * ldc, acc[r][0]);
            _mm256_storeu_ps(c + static_cast<std::ptrdiff_t>(r) * ldc + 8, acc[r][1]);
        }
    } else {
        for (int r = 0; r < kMr; ++r) {
            _mm256_store_ps(tile + r * kNr, acc[r][0]);
            _mm256_store_ps(tile + r * kNr + 8, acc[r][1]);
        }
        for (int r = 0; r < rows; ++r) {
            for (int j = 0; j < cols; ++j) c[static_cast<std::ptrdiff_t>(r) * ldc + j] = tile[r * kNr + j];
        }
    }
}

}  // namespace

void gemm_avx2(Trans ta, Trans tb, int m, int n, int k, const float* a, int lda, const float* b,
               int ldb, float* c, int ldc, bool accumulate) {
    if (m <= 0 || n <= 0) return;
    if (k <= 0) {
        if (!accumulate) {
            for (int i = 0; i < m; ++i) std::fill_n(c + static_cast<std::ptrdiff_t>(i) * ldc, n, 0.0f);
        }
        return;
    }
    auto& buf = pack_buffers();
    buf.a.resize(static_cast<std::size_t>(kMc + kMr) * kKc);
    buf.b.resize(static_cast<std::size_t>(kNc + kNr) * kKc);

    for (int jc = 0; jc < n; jc += kNc) {
        const int nc = std::min(kNc, n - jc);
        for (int pc = 0; pc < k; pc += kKc) {
            const int kc = std::min(kKc, k - pc);
            const bool load = accumulate || pc > 0;
            pack_b(tb, b, ldb, pc, kc, jc, nc, buf.b.data());
            for (int ic = 0; ic < m; ic += kMc) {
                const int mc = std::min(kMc, m - ic);
                pack_a(ta, a, lda, ic, mc, pc, kc, buf.a.data());
                for (int jr = 0; jr < nc; jr += kNr) {
                    const float* bp = buf.b.data() + static_cast<std::ptrdiff_t>(jr / kNr) * kc * kNr;
                    for (int ir = 0; ir < mc; ir += kMr) {
                        const float* ap = buf.a.data() + static_cast<std::ptrdiff_t>(ir / kMr) * kc * kMr;
                        float* cp = c + static_cast<std::ptrdiff_t>(ic + ir) * ldc + jc + jr;
                        micro_kernel(kc, ap, bp, cp, ldc, std::min(kMr, mc - ir), std::min(kNr, nc - jr),
                                     load);
                    }
                }
            }
        }
    }
}

float dot_avx2(const float* x, const float* y, std::size_t n) {
    __m256 acc0 = _mm256_setzero_ps();
    __m256 acc1 = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
        acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8), _mm256_loadu_ps(y + i + 8), acc1);
    }
    for (; i + 8 <= n; i += 8) acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
    alignas(32) float lanes[8];
    _mm256_store_ps(lanes, _mm256_add_ps(acc0, acc1));
    float s = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

void axpy_avx2(float alpha, const float* x, float* y, std::size_t n) {
    const __m256 va = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace fabric::simd::detail
