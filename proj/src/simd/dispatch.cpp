#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <string>

#include "fabric/simd/kernels.hpp"

namespace fabric::simd {

namespace {

constexpr KernelTable kScalar{Isa::scalar, &detail::gemm_scalar, &detail::dot_scalar, &detail::axpy_scalar};

#if defined(FABRIC_HAVE_AVX2)
constexpr KernelTable kAvx2{Isa::avx2, &detail::gemm_avx2, &detail::dot_avx2, &detail::axpy_avx2};
#endif

const KernelTable& select() {
    if (const char* forced = std::getenv("FABRIC_SIMD"); forced != nullptr && std::strcmp(forced, "scalar") == 0) {
        return kScalar;
    }
    if (isa_available(Isa::avx2)) return kernels_for(Isa::avx2);
    return kScalar;
}

}  // namespace

bool isa_available(Isa isa) {
    switch (isa) {
        case Isa::scalar:
            return true;
        case Isa::avx2:
#if defined(FABRIC_HAVE_AVX2)
            __builtin_cpu_init();
            return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
            return false;
#endif
    }
    return false;
}

const KernelTable& kernels_for(Isa isa) {
    switch (isa) {
        case Isa::scalar:
            return kScalar;
        case Isa::avx2:
#if defined(FABRIC_HAVE_AVX2)
            if (isa_available(Isa::avx2)) return kAvx2;
#endif
            break;
    }
    throw std::runtime_error("kernel set not available on this CPU: " + std::string(isa_name(isa)));
}

const KernelTable& active_kernels() {
    static const KernelTable& table = select();
    return table;
}

std::string_view isa_name(Isa isa) {
    switch (isa) {
        case Isa::scalar:
            return "scalar";
        case Isa::avx2:
            return "avx2";
    }
    return "unknown";
}

}  // namespace fabric::simd
