#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "msfseg/errors.hpp"
#include "msfseg/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace msf;

namespace {

Mask2D square(int h, int w, int y0, int x0, int side) {
    Mask2D m(h, w);
    for (int y = y0; y < y0 + side; ++y)
        for (int x = x0; x < x0 + side; ++x) m.at(y, x) = 1;
    return m;
}

}  // namespace

TEST_CASE("hand-counted values") {
    Mask2D a(4, 4), b(4, 4);
    a.bits = {1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
    b.bits = {1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
    CHECK(dice(a, b) == 0.5);
    CHECK(jaccard(a, b) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(dice(a, a) == 1.0);
    CHECK(jaccard(a, a) == 1.0);
    CHECK(boundary_f(a, a, 0) == 1.0);
    Mask2D c(4, 4);
    c.bits[15] = 1;
    CHECK(dice(a, c) == 0.0);
    CHECK(dice(Mask2D(4, 4), Mask2D(4, 4)) == 1.0);
    CHECK(jaccard(Mask2D(4, 4), Mask2D(4, 4)) == 1.0);
    CHECK(boundary_f(Mask2D(4, 4), Mask2D(4, 4), 2) == 1.0);
    CHECK(boundary_f(a, Mask2D(4, 4), 2) == 0.0);
    CHECK_THROWS_AS(dice(a, Mask2D(4, 5)), InputError);
    CHECK_THROWS_AS(jaccard(a, Mask2D(3, 4)), InputError);
    CHECK_THROWS_AS(boundary_f(a, Mask2D(3, 4), 1), InputError);
}

TEST_CASE("shifted square and tolerance") {
    const Mask2D gt = square(16, 16, 4, 4, 6), shifted = square(16, 16, 4, 5, 6);
    CHECK(boundary_f(shifted, gt, 1) == 1.0);
    CHECK(boundary_f(shifted, gt, 0) < 1.0);
}

TEST_CASE("default tolerance") {
    CHECK(default_boundary_tolerance(64, 64) == 1);
    CHECK(default_boundary_tolerance(384, 384) == 5);
}

TEST_CASE("oracle equivalence on random 16x16 pairs") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    for (int t = 0; t < 300; ++t) {
        const Mask2D a = testing::random_mask(rng, 16, 16, u(rng)), b = testing::random_mask(rng, 16, 16, u(rng));
        CHECK(std::abs(dice(a, b) - testing::MetricOracle::dice(a, b)) <= 1e-12);
        CHECK(std::abs(jaccard(a, b) - testing::MetricOracle::jaccard(a, b)) <= 1e-12);
        const double j = jaccard(a, b);
        CHECK(std::abs(2 * j / (1 + j) - dice(a, b)) <= 1e-12);
        CHECK(j <= dice(a, b) + 1e-15);
        for (int tol : {0, 1, 2, 3}) CHECK(boundary_f(a, b, tol) == testing::MetricOracle::f(a, b, tol));
        CHECK(dice(a, b) == dice(b, a));
        CHECK(jaccard(a, b) == jaccard(b, a));
        CHECK(boundary_f(a, b, 1) == boundary_f(b, a, 1));
    }
}

TEST_CASE("flipping disagreeing pixels never helps") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 50; ++t) {
        const Mask2D gt = testing::random_disc(rng, 16, 16, 4);
        Mask2D pred = gt;
        double last_d = 1.0, last_j = 1.0;
        for (int k = 0; k < 40; ++k) {
            const int i = std::uniform_int_distribution<int>(0, 255)(rng);
            if (pred.bits[i] != gt.bits[i]) continue;
            pred.bits[i] ^= 1;
            const double d = dice(pred, gt), j = jaccard(pred, gt);
            CHECK(d <= last_d);
            CHECK(j <= last_j);
            last_d = d;
            last_j = j;
        }
    }
}

TEST_CASE("volume evaluation and reports") {
    std::mt19937_64 rng(3);
    std::vector<Mask2D> gt;
    for (int z = 0; z < 4; ++z) gt.push_back(testing::random_disc(rng, 16, 16, 3));
    gt.push_back(Mask2D(16, 16));

    SUBCASE("perfect volume") {
        MetricReport r = evaluate_run({{"v0", 3, gt, gt}}, "intra", 7);
        REQUIRE(r.rows.size() == 1);
        CHECK(r.rows[0] == MetricRow{"v0", 3, 1.0, 1.0, 1.0, 1.0});
        CHECK(r.mean().dice == 1.0);
    }
    SUBCASE("mean over volumes and jf per row") {
        std::vector<Mask2D> empty(gt.size(), Mask2D(16, 16));
        MetricReport r = evaluate_run({{"a", 3, gt, gt}, {"b", 3, empty, gt}}, "inter", 1);
        CHECK(r.mean().dice == 0.5);
        for (const auto& row : r.rows) CHECK(row.jf == (row.j + row.f) / 2.0);
        for (const auto& row : r.aggregates()) CHECK(row.jf == (row.j + row.f) / 2.0);
    }
    SUBCASE("stacked voxels, not per-slice means") {
        std::vector<Mask2D> pred = gt;
        pred[0] = Mask2D(16, 16);
        std::size_t inter = 0, total = 0;
        for (std::size_t z = 0; z < gt.size(); ++z) {
            for (std::size_t i = 0; i < 256; ++i) inter += pred[z].bits[i] && gt[z].bits[i];
            total += pred[z].area() + gt[z].area();
        }
        CHECK(volume_dice(pred, gt) == doctest::Approx(2.0 * inter / total).epsilon(1e-15));
    }
    SUBCASE("misalignment names the volume") {
        std::vector<Mask2D> shorter(gt.begin(), gt.end() - 1);
        try {
            evaluate_run({{"ok", 3, gt, gt}, {"bad_vol", 3, shorter, gt}}, "x", 0);
            FAIL("expected an error");
        } catch (const InputError& e) {
            CHECK(std::string(e.what()).find("bad_vol") != std::string::npos);
        }
    }
    SUBCASE("serialization and averaging") {
        std::vector<Mask2D> half = gt;
        half[1] = Mask2D(16, 16);
        MetricReport r1 = evaluate_run({{"a", 3, gt, gt}, {"b", 3, half, gt}}, "p", 1);
        MetricReport r2 = evaluate_run({{"a", 3, half, gt}, {"b", 3, gt, gt}}, "p", 2);
        CHECK(MetricReport::from_json(r1.to_json()) == r1);
        CHECK(r1.to_tsv().find("volume\tclass\tdice\tj\tf\tjf") != std::string::npos);
        MetricReport avg = average_reports({r1, r2});
        CHECK(avg.seeds == std::vector<std::uint64_t>{1, 2});
        for (std::size_t i = 0; i < avg.rows.size(); ++i)
            CHECK(avg.rows[i].dice == doctest::Approx((r1.rows[i].dice + r2.rows[i].dice) / 2).epsilon(1e-15));
        MetricReport other = evaluate_run({{"c", 3, gt, gt}, {"b", 3, gt, gt}}, "p", 3);
        CHECK_THROWS_AS(average_reports({r1, other}), InputError);
    }
}
