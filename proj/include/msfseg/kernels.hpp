#pragma once

// Dense double-precision inner loops. Every kernel has a portable scalar
// reference and, on x86-64, an AVX2/FMA variant; the active table is picked
// once at startup from CPUID (override with MSF_KERNELS=scalar|avx2).
//
// All matrices are row-major with explicit leading dimensions. The gemm
// kernels accumulate into C (C += op(A)·op(B)).

#include <cstddef>
#include <string_view>

namespace msf::kernels {

enum class Isa { scalar, avx2 };

struct KernelTable {
    Isa isa;
    double (*dot)(const double* a, const double* b, std::size_t n);
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
    // C[m×n] += A[m×k] · B[k×n]
    void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const double* a,
                    std::size_t lda, const double* b, std::size_t ldb, double* c,
                    std::size_t ldc);
    // C[m×n] += A[m×k] · B[n×k]ᵀ
    void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const double* a,
                    std::size_t lda, const double* b, std::size_t ldb, double* c,
                    std::size_t ldc);
    // C[m×n] += A[k×m]ᵀ · B[k×n]
    void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const double* a,
                    std::size_t lda, const double* b, std::size_t ldb, double* c,
                    std::size_t ldc);
    // y = max(x, 0)
    void (*relu)(const double* x, double* y, std::size_t n);
    // gx += gy where x > 0
    void (*relu_backward)(const double* x, const double* gy, double* gx, std::size_t n);
};

const KernelTable& scalar_table();

/// nullptr when the AVX2 variant was not compiled in.
const KernelTable* avx2_table();

bool cpu_supports(Isa isa);

/// Table used by the free functions below.
const KernelTable& active();

/// Switches the active table. Throws ConfigError when the ISA is unavailable.
void select(Isa isa);

std::string_view isa_name(Isa isa);

inline double dot(const double* a, const double* b, std::size_t n) { return active().dot(a, b, n); }

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
    active().axpy(alpha, x, y, n);
}

inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                    const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    active().gemm_nn(m, n, k, a, lda, b, ldb, c, ldc);
}

inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                    const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    active().gemm_nt(m, n, k, a, lda, b, ldb, c, ldc);
}

inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                    const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    active().gemm_tn(m, n, k, a, lda, b, ldb, c, ldc);
}

inline void relu(const double* x, double* y, std::size_t n) { active().relu(x, y, n); }

inline void relu_backward(const double* x, const double* gy, double* gx, std::size_t n) {
    active().relu_backward(x, gy, gx, n);
}

}  // namespace msf::kernels
