#include <doctest.h>

#include <cmath>
#include <random>

#include "msfseg/backbone.hpp"
#include "msfseg/errors.hpp"
#include "msfseg/ops.hpp"
#include "test_util.hpp"

using namespace msf;

namespace {

BackboneConfig mini_config() {
    BackboneConfig cfg;
    cfg.input_size = 16;
    cfg.in_channels = 1;
    cfg.channels = {8, 8};
    cfg.norm_groups = 4;
    return cfg;
}

std::vector<ag::Var> all_params(const ParamStore& store) {
    std::vector<ag::Var> out;
    for (const auto& [name, v] : store.entries()) out.push_back(v);
    return out;
}

}  // namespace

TEST_CASE("default pyramid shapes at 384") {
    BackboneConfig cfg;
    ParamStore store;
    std::mt19937_64 rng(1);
    ToyBackbone bb(cfg, store, rng);
    std::mt19937_64 data(2);
    FeaturePyramid pyr = bb.extract(testing::random_image(data, 384, 384));
    REQUIRE(pyr.size() == 3);
    CHECK(pyr.levels[0].shape() == ag::Shape{64, 96, 96});
    CHECK(pyr.levels[1].shape() == ag::Shape{128, 48, 48});
    CHECK(pyr.levels[2].shape() == ag::Shape{256, 24, 24});
    CHECK(pyr.strides == std::vector<int>{4, 8, 16});
    CHECK_NOTHROW(validate(pyr));
}

TEST_CASE("extract rejects wrong sizes and non-finite pixels") {
    ParamStore store;
    std::mt19937_64 rng(1);
    ToyBackbone bb(mini_config(), store, rng);
    CHECK_THROWS_AS(bb.extract(Image2D(8, 8)), ConfigError);
    Image2D bad(16, 16);
    bad.at(3, 3) = std::nan("");
    CHECK_THROWS_AS(bb.extract(bad), InputError);
}

TEST_CASE("zero image with zero biases gives a zero pyramid") {
    ParamStore store;
    std::mt19937_64 rng(3);
    ToyBackbone bb(mini_config(), store, rng);
    FeaturePyramid pyr = bb.extract(Image2D(16, 16));
    for (const auto& level : pyr.levels)
        for (double v : level.value()) CHECK(v == 0.0);
    PooledDescriptor d = pooled_descriptor(pyr);
    CHECK(d.zero_norm);
    for (double v : d.vector) CHECK(v == 0.0);
}

TEST_CASE("extraction is bit-reproducible") {
    std::mt19937_64 data(5);
    const Image2D img = testing::random_image(data, 16, 16);
    auto run = [&] {
        ParamStore store;
        std::mt19937_64 rng(9);
        ToyBackbone bb(mini_config(), store, rng);
        return bb.extract(img);
    };
    FeaturePyramid a = run(), b = run();
    for (int j = 0; j < a.size(); ++j) {
        const auto va = a.levels[j].value(), vb = b.levels[j].value();
        CHECK(std::equal(va.begin(), va.end(), vb.begin(), vb.end()));
    }
}

TEST_CASE("pooled descriptor") {
    SUBCASE("constant channels") {
        FeaturePyramid pyr;
        std::vector<double> v(2 * 9);
        for (int i = 0; i < 9; ++i) {
            v[i] = 3.0;
            v[9 + i] = 4.0;
        }
        pyr.levels = {ag::Var::constant({2, 3, 3}, v)};
        pyr.strides = {4};
        PooledDescriptor d = pooled_descriptor(pyr);
        CHECK_FALSE(d.zero_norm);
        CHECK(d.vector[0] == doctest::Approx(0.6));
        CHECK(d.vector[1] == doctest::Approx(0.8));
        CHECK(cosine_similarity(d, d) == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("random 4x3x3 against a recomputation") {
        std::mt19937_64 rng(11);
        FeaturePyramid pyr;
        pyr.levels = {ag::Var::constant({2, 6, 6}, testing::random_vector(rng, 72)),
                      ag::Var::constant({4, 3, 3}, testing::random_vector(rng, 36))};
        pyr.strides = {4, 8};
        const auto x = pyr.levels[1].value();
        std::vector<double> mean(4, 0.0);
        for (int c = 0; c < 4; ++c)
            for (int i = 0; i < 9; ++i) mean[c] += x[c * 9 + i] / 9.0;
        double norm = 0.0;
        for (double m : mean) norm += m * m;
        norm = std::sqrt(norm);
        PooledDescriptor d = pooled_descriptor(pyr);
        double unit = 0.0;
        for (int c = 0; c < 4; ++c) {
            CHECK(d.vector[c] == doctest::Approx(mean[c] / norm).epsilon(1e-12));
            unit += d.vector[c] * d.vector[c];
        }
        CHECK(std::abs(std::sqrt(unit) - 1.0) < 1e-6);
    }
}

TEST_CASE("pyramid validation") {
    FeaturePyramid pyr;
    pyr.levels = {ag::Var::zeros({2, 4, 4}), ag::Var::zeros({2, 4, 4})};
    pyr.strides = {4, 8};
    CHECK_THROWS_AS(validate(pyr), InputError);
    pyr.levels = {ag::Var::zeros({2, 4, 4})};
    pyr.strides = {4};
    CHECK_THROWS_AS(validate(pyr), InputError);
}

TEST_CASE("precomputed features are served by pixel content") {
    std::mt19937_64 rng(13);
    const Image2D a = testing::random_image(rng, 16, 16), b = testing::random_image(rng, 16, 16);
    FeaturePyramid pa;
    pa.levels = {ag::Var::constant({2, 4, 4}, testing::random_vector(rng, 32)),
                 ag::Var::constant({2, 2, 2}, testing::random_vector(rng, 8))};
    pa.strides = {4, 8};
    PrecomputedFeatures src;
    src.add(a, pa);
    FeaturePyramid got = src.extract(a);
    CHECK(got.levels[1].value()[3] == pa.levels[1].value()[3]);
    CHECK_THROWS_AS(src.extract(b), InputError);
}

TEST_CASE("backbone parameter gradients on a two-level miniature") {
    ParamStore store;
    std::mt19937_64 rng(17);
    ToyBackbone bb(mini_config(), store, rng);
    // non-zero biases and affine parameters so every coordinate carries signal
    for (const auto& [name, v] : store.entries()) {
        const bool bias = name.ends_with(".b") || name.ends_with(".beta");
        if (!bias) continue;
        auto vals = ag::Var(v).mutable_value();
        for (double& x : vals) x = std::uniform_real_distribution<double>(-0.2, 0.2)(rng);
    }
    std::mt19937_64 data(19);
    const Image2D img = testing::random_image(data, 16, 16);
    auto w0 = ag::Var::constant({8, 4, 4}, testing::random_vector(data, 128));
    auto w1 = ag::Var::constant({8, 2, 2}, testing::random_vector(data, 32));
    auto f = [&] {
        FeaturePyramid p = bb.extract(img);
        return ag::add(ag::sum(ag::mul(p.levels[0], w0)), ag::sum(ag::mul(p.levels[1], w1)));
    };
    auto res = testing::grad_check(f, all_params(store), 1e-6, 48);
    CHECK(res.checked > 0);
    CHECK(res.rel_error <= 1e-4);
}
