#include <doctest.h>

#include <random>

#include "msfseg/kernels.hpp"
#include "test_util.hpp"

using namespace msf;
using msf::kernels::KernelTable;

namespace {

double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(a[i])));
    return worst;
}

std::vector<const KernelTable*> vector_tables() {
    std::vector<const KernelTable*> out;
    if (kernels::avx2_table() && kernels::cpu_supports(kernels::Isa::avx2)) out.push_back(kernels::avx2_table());
    return out;
}

struct GemmCase {
    std::size_t m, n, k;
};

}  // namespace

TEST_CASE("simd kernels match the scalar reference") {
    const auto tables = vector_tables();
    if (tables.empty()) {
        MESSAGE("no vector ISA available; only the scalar path is exercised");
        return;
    }
    const KernelTable& ref = kernels::scalar_table();
    std::mt19937_64 rng(11);
    for (const KernelTable* t : tables) {
        CAPTURE(kernels::isa_name(t->isa));
        for (std::size_t n : {0u, 1u, 3u, 4u, 7u, 16u, 17u, 33u, 100u, 1027u}) {
            auto a = testing::random_vector(rng, n), b = testing::random_vector(rng, n);
            const double r = ref.dot(a.data(), b.data(), n);
            CHECK(t->dot(a.data(), b.data(), n) == doctest::Approx(r).epsilon(1e-12));

            auto y1 = testing::random_vector(rng, n), y2 = y1;
            ref.axpy(0.37, a.data(), y1.data(), n);
            t->axpy(0.37, a.data(), y2.data(), n);
            CHECK(max_rel_diff(y1, y2) < 1e-14);

            std::vector<double> r1(n), r2(n);
            ref.relu(a.data(), r1.data(), n);
            t->relu(a.data(), r2.data(), n);
            CHECK(r1 == r2);

            auto g1 = testing::random_vector(rng, n), g2 = g1;
            ref.relu_backward(a.data(), b.data(), g1.data(), n);
            t->relu_backward(a.data(), b.data(), g2.data(), n);
            CHECK(max_rel_diff(g1, g2) < 1e-15);
        }

        for (GemmCase gc : {GemmCase{1, 1, 1}, GemmCase{4, 8, 3}, GemmCase{5, 9, 7}, GemmCase{13, 21, 17},
                            GemmCase{16, 64, 144}, GemmCase{3, 2, 40}, GemmCase{37, 5, 4}}) {
            CAPTURE(gc.m);
            CAPTURE(gc.n);
            CAPTURE(gc.k);
            // Padded leading dimensions exercise strided access.
            const std::size_t lda = gc.k + 2, ldb = gc.n + 3, ldc = gc.n + 1;
            auto a = testing::random_vector(rng, gc.m * lda);
            auto b = testing::random_vector(rng, gc.k * ldb);
            auto c1 = testing::random_vector(rng, gc.m * ldc), c2 = c1;
            ref.gemm_nn(gc.m, gc.n, gc.k, a.data(), lda, b.data(), ldb, c1.data(), ldc);
            t->gemm_nn(gc.m, gc.n, gc.k, a.data(), lda, b.data(), ldb, c2.data(), ldc);
            CHECK(max_rel_diff(c1, c2) < 1e-12);

            const std::size_t ldbt = gc.k + 1;
            auto bt = testing::random_vector(rng, gc.n * ldbt);
            c2 = c1;
            ref.gemm_nt(gc.m, gc.n, gc.k, a.data(), lda, bt.data(), ldbt, c1.data(), ldc);
            t->gemm_nt(gc.m, gc.n, gc.k, a.data(), lda, bt.data(), ldbt, c2.data(), ldc);
            CHECK(max_rel_diff(c1, c2) < 1e-12);

            const std::size_t ldat = gc.m + 2;
            auto at = testing::random_vector(rng, gc.k * ldat);
            c2 = c1;
            ref.gemm_tn(gc.m, gc.n, gc.k, at.data(), ldat, b.data(), ldb, c1.data(), ldc);
            t->gemm_tn(gc.m, gc.n, gc.k, at.data(), ldat, b.data(), ldb, c2.data(), ldc);
            CHECK(max_rel_diff(c1, c2) < 1e-12);
        }
    }
}

TEST_CASE("gemm reference agrees with a triple loop") {
    std::mt19937_64 rng(3);
    const std::size_t m = 6, n = 5, k = 4;
    auto a = testing::random_vector(rng, m * k), b = testing::random_vector(rng, k * n);
    std::vector<double> c(m * n, 0.0), expect(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) expect[i * n + j] += a[i * k + p] * b[p * n + j];
    kernels::gemm_nn(m, n, k, a.data(), k, b.data(), n, c.data(), n);
    CHECK(max_rel_diff(expect, c) < 1e-13);
}

TEST_CASE("kernel selection") {
    const auto before = kernels::active().isa;
    kernels::select(kernels::Isa::scalar);
    CHECK(kernels::active().isa == kernels::Isa::scalar);
    if (kernels::cpu_supports(kernels::Isa::avx2)) {
        kernels::select(kernels::Isa::avx2);
        CHECK(kernels::active().isa == kernels::Isa::avx2);
    } else {
        CHECK_THROWS(kernels::select(kernels::Isa::avx2));
    }
    kernels::select(before);
}
