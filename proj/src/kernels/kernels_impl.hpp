#pragma once

#include <cstddef>

namespace msf::kernels {

#define MSF_KERNEL_DECLS                                                                        \
    double dot(const double* a, const double* b, std::size_t n);                                \
    void axpy(double alpha, const double* x, double* y, std::size_t n);                         \
    void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda, \
                 const double* b, std::size_t ldb, double* c, std::size_t ldc);                 \
    void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda, \
                 const double* b, std::size_t ldb, double* c, std::size_t ldc);                 \
    void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda, \
                 const double* b, std::size_t ldb, double* c, std::size_t ldc);                 \
    void relu(const double* x, double* y, std::size_t n);                                       \
    void relu_backward(const double* x, const double* gy, double* gx, std::size_t n);

namespace scalar {
MSF_KERNEL_DECLS
}

#if defined(MSF_HAVE_AVX2)
namespace avx2 {
MSF_KERNEL_DECLS
}
#endif

#undef MSF_KERNEL_DECLS

}  // namespace msf::kernels
