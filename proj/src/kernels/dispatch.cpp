#include "msfseg/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

#include "kernels_impl.hpp"
#include "msfseg/errors.hpp"

namespace msf::kernels {

namespace {

constexpr KernelTable kScalar{Isa::scalar,         scalar::dot,     scalar::axpy,
                              scalar::gemm_nn,     scalar::gemm_nt, scalar::gemm_tn,
                              scalar::relu,        scalar::relu_backward};

#if defined(MSF_HAVE_AVX2)
constexpr KernelTable kAvx2{Isa::avx2,         avx2::dot,     avx2::axpy,
                            avx2::gemm_nn,     avx2::gemm_nt, avx2::gemm_tn,
                            avx2::relu,        avx2::relu_backward};
#endif

const KernelTable* initial_table() {
    const char* env = std::getenv("MSF_KERNELS");
    const std::string want = env ? env : "auto";
    if (want == "scalar") return &kScalar;
#if defined(MSF_HAVE_AVX2)
    if (cpu_supports(Isa::avx2)) return &kAvx2;
#endif
    return &kScalar;
}

std::atomic<const KernelTable*>& current() {
    static std::atomic<const KernelTable*> table{initial_table()};
    return table;
}

}  // namespace

const KernelTable& scalar_table() { return kScalar; }

const KernelTable* avx2_table() {
#if defined(MSF_HAVE_AVX2)
    return &kAvx2;
#else
    return nullptr;
#endif
}

bool cpu_supports(Isa isa) {
    switch (isa) {
        case Isa::scalar:
            return true;
        case Isa::avx2:
#if defined(MSF_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
            return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
            return false;
#endif
    }
    return false;
}

const KernelTable& active() { return *current().load(std::memory_order_relaxed); }

void select(Isa isa) {
    if (!cpu_supports(isa)) throw ConfigError("kernel ISA not available: " + std::string(isa_name(isa)));
    current().store(isa == Isa::avx2 ? avx2_table() : &kScalar);
}

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

}  // namespace msf::kernels
