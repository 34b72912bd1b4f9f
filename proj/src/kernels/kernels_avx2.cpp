// Compiled with -mavx2 -mfma; only reached through the dispatch table after a CPUID check.
#include "kernels_impl.hpp"

#include <immintrin.h>

namespace msf::kernels::avx2 {

namespace {

inline double hsum(__m256d v) {
    const __m128d lo = _mm256_castpd256_pd128(v);
    const __m128d hi = _mm256_extractf128_pd(v, 1);
    const __m128d s = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

template <bool TransA>
inline double a_at(const double* a, std::size_t lda, std::size_t i, std::size_t p) {
    if constexpr (TransA)
        return a[p * lda + i];
    else
        return a[i * lda + p];
}

// 4×8 register block; rows of C are swept one B row at a time so the
// accumulation order over p matches the scalar reference.
template <bool TransA>
void gemm_rows(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        double* c0 = c + (i + 0) * ldc;
        double* c1 = c + (i + 1) * ldc;
        double* c2 = c + (i + 2) * ldc;
        double* c3 = c + (i + 3) * ldc;
        std::size_t j = 0;
        for (; j + 8 <= n; j += 8) {
            __m256d r00 = _mm256_loadu_pd(c0 + j), r01 = _mm256_loadu_pd(c0 + j + 4);
            __m256d r10 = _mm256_loadu_pd(c1 + j), r11 = _mm256_loadu_pd(c1 + j + 4);
            __m256d r20 = _mm256_loadu_pd(c2 + j), r21 = _mm256_loadu_pd(c2 + j + 4);
            __m256d r30 = _mm256_loadu_pd(c3 + j), r31 = _mm256_loadu_pd(c3 + j + 4);
            for (std::size_t p = 0; p < k; ++p) {
                const double* brow = b + p * ldb + j;
                const __m256d b0 = _mm256_loadu_pd(brow);
                const __m256d b1 = _mm256_loadu_pd(brow + 4);
                __m256d av = _mm256_set1_pd(a_at<TransA>(a, lda, i + 0, p));
                r00 = _mm256_fmadd_pd(av, b0, r00);
                r01 = _mm256_fmadd_pd(av, b1, r01);
                av = _mm256_set1_pd(a_at<TransA>(a, lda, i + 1, p));
                r10 = _mm256_fmadd_pd(av, b0, r10);
                r11 = _mm256_fmadd_pd(av, b1, r11);
                av = _mm256_set1_pd(a_at<TransA>(a, lda, i + 2, p));
                r20 = _mm256_fmadd_pd(av, b0, r20);
                r21 = _mm256_fmadd_pd(av, b1, r21);
                av = _mm256_set1_pd(a_at<TransA>(a, lda, i + 3, p));
                r30 = _mm256_fmadd_pd(av, b0, r30);
                r31 = _mm256_fmadd_pd(av, b1, r31);
            }
            _mm256_storeu_pd(c0 + j, r00);
            _mm256_storeu_pd(c0 + j + 4, r01);
            _mm256_storeu_pd(c1 + j, r10);
            _mm256_storeu_pd(c1 + j + 4, r11);
            _mm256_storeu_pd(c2 + j, r20);
            _mm256_storeu_pd(c2 + j + 4, r21);
            _mm256_storeu_pd(c3 + j, r30);
            _mm256_storeu_pd(c3 + j + 4, r31);
        }
        for (; j + 4 <= n; j += 4) {
            __m256d r0 = _mm256_loadu_pd(c0 + j);
            __m256d r1 = _mm256_loadu_pd(c1 + j);
            __m256d r2 = _mm256_loadu_pd(c2 + j);
            __m256d r3 = _mm256_loadu_pd(c3 + j);
            for (std::size_t p = 0; p < k; ++p) {
                const __m256d bv = _mm256_loadu_pd(b + p * ldb + j);
                r0 = _mm256_fmadd_pd(_mm256_set1_pd(a_at<TransA>(a, lda, i + 0, p)), bv, r0);
                r1 = _mm256_fmadd_pd(_mm256_set1_pd(a_at<TransA>(a, lda, i + 1, p)), bv, r1);
                r2 = _mm256_fmadd_pd(_mm256_set1_pd(a_at<TransA>(a, lda, i + 2, p)), bv, r2);
                r3 = _mm256_fmadd_pd(_mm256_set1_pd(a_at<TransA>(a, lda, i + 3, p)), bv, r3);
            }
            _mm256_storeu_pd(c0 + j, r0);
            _mm256_storeu_pd(c1 + j, r1);
            _mm256_storeu_pd(c2 + j, r2);
            _mm256_storeu_pd(c3 + j, r3);
        }
        for (; j < n; ++j) {
            double s0 = c0[j], s1 = c1[j], s2 = c2[j], s3 = c3[j];
            for (std::size_t p = 0; p < k; ++p) {
                const double bv = b[p * ldb + j];
                s0 += a_at<TransA>(a, lda, i + 0, p) * bv;
                s1 += a_at<TransA>(a, lda, i + 1, p) * bv;
                s2 += a_at<TransA>(a, lda, i + 2, p) * bv;
                s3 += a_at<TransA>(a, lda, i + 3, p) * bv;
            }
            c0[j] = s0;
            c1[j] = s1;
            c2[j] = s2;
            c3[j] = s3;
        }
    }
    for (; i < m; ++i) {
        double* crow = c + i * ldc;
        for (std::size_t p = 0; p < k; ++p) axpy(a_at<TransA>(a, lda, i, p), b + p * ldb, crow, n);
    }
}

}  // namespace

double dot(const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    __m256d s0 = _mm256_setzero_pd(), s1 = _mm256_setzero_pd();
    __m256d s2 = _mm256_setzero_pd(), s3 = _mm256_setzero_pd();
    for (; i + 16 <= n; i += 16) {
        s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
        s1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), s1);
        s2 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 8), _mm256_loadu_pd(b + i + 8), s2);
        s3 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 12), _mm256_loadu_pd(b + i + 12), s3);
    }
    for (; i + 4 <= n; i += 4) s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
    double s = hsum(_mm256_add_pd(_mm256_add_pd(s0, s1), _mm256_add_pd(s2, s3)));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
    const __m256d av = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
        _mm256_storeu_pd(y + i + 4,
                         _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4)));
    }
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    gemm_rows<false>(m, n, k, a, lda, b, ldb, c, ldc);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    gemm_rows<true>(m, n, k, a, lda, b, ldb, c, ldc);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] += dot(a + i * lda, b + j * ldb, k);
}

void relu(const double* x, double* y, std::size_t n) {
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) _mm256_storeu_pd(y + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
    for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(const double* x, const double* gy, double* gx, std::size_t n) {
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
        const __m256d g = _mm256_and_pd(mask, _mm256_loadu_pd(gy + i));
        _mm256_storeu_pd(gx + i, _mm256_add_pd(_mm256_loadu_pd(gx + i), g));
    }
    for (; i < n; ++i)
        if (x[i] > 0.0) gx[i] += gy[i];
}

}  // namespace msf::kernels::avx2
