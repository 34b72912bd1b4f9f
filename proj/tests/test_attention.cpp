#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "msfseg/errors.hpp"
#include "msfseg/mask_attention.hpp"
#include "msfseg/ops.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace msf;

namespace {

BackboneConfig tiny_backbone() {
    BackboneConfig cfg;
    cfg.input_size = 32;
    cfg.in_channels = 1;
    cfg.channels = {8, 8};
    return cfg;
}

AttentionConfig tiny_attention() {
    AttentionConfig cfg;
    cfg.heads = 2;
    cfg.head_channels = 4;
    return cfg;
}

}  // namespace

TEST_CASE("token counts") {
    ParamStore store;
    std::mt19937_64 rng(1);
    MaskAttention att(tiny_backbone(), tiny_attention(), store, rng);
    Mask2D mask(32, 32);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 32; ++x) mask.at(y, x) = 1;
    ag::Var qf = testing::random_param(rng, {8, 8, 8});

    TokenSet one = att.build_tokens(0, qf, {testing::random_param(rng, {8, 8, 8})}, {mask});
    CHECK(one.q.shape() == ag::Shape{64, 8});
    CHECK(one.k.shape() == ag::Shape{64, 8});
    CHECK(one.v.shape() == ag::Shape{64, 8});

    std::vector<ag::Var> seq{testing::random_param(rng, {8, 8, 8}), testing::random_param(rng, {8, 8, 8}),
                             testing::random_param(rng, {8, 8, 8})};
    TokenSet three = att.build_tokens(0, qf, seq, {mask, mask, mask});
    CHECK(three.q.dim(0) == 64);
    CHECK(three.k.dim(0) == 192);
    CHECK(three.v.dim(0) == 192);
    CHECK(three.v_raw.value()[0] == 1.0);
    CHECK(three.v_raw.value()[63] == 0.0);

    CHECK_THROWS_AS(att.build_tokens(0, qf, seq, {mask, mask}), InputError);

    TokenSet bg = att.build_tokens(0, qf, {seq[0]}, {Mask2D(32, 32)});
    for (double v : bg.v_raw.value()) CHECK(v == 0.0);
}

TEST_CASE("sequence slices get distinct key encodings") {
    const auto p0 = positional_encoding(4, 4, 8, 0.0);
    const auto p1 = positional_encoding(4, 4, 8, 1.0);
    const auto pm = positional_encoding(4, 4, 8, -1.0);
    CHECK(p0 != p1);
    CHECK(p1 != pm);
    // row half of the first token encodes row 0: sin(0)=0, cos(0)=1
    CHECK(p0[0] == 0.0);
    CHECK(p0[1] == 1.0);
}

TEST_CASE("attention matches a loop oracle on five tokens") {
    std::mt19937_64 rng(2);
    const int m = 5, n = 5, e = 8;
    for (int heads : {1, 2, 4}) {
        auto q = testing::random_vector(rng, m * e, -2, 2), k = testing::random_vector(rng, n * e, -2, 2),
             v = testing::random_vector(rng, n * e);
        std::vector<double> probs;
        ag::Var out = ag::multihead_attention(ag::Var::constant({m, e}, q), ag::Var::constant({n, e}, k),
                                              ag::Var::constant({n, e}, v), heads, &probs);
        const auto ref = testing::attention_oracle(q, k, v, m, n, e, heads);
        for (int i = 0; i < m * e; ++i) CHECK(std::abs(out.value()[i] - ref[i]) <= 1e-6);

        REQUIRE(probs.size() == static_cast<std::size_t>(heads * m * n));
        for (int r = 0; r < heads * m; ++r) {
            const double s = std::accumulate(probs.begin() + r * n, probs.begin() + (r + 1) * n, 0.0);
            CHECK(std::abs(s - 1.0) <= 1e-6);
        }
        // outputs are convex combinations of value rows, column by column
        for (int c = 0; c < e; ++c) {
            double lo = 1e300, hi = -1e300;
            for (int j = 0; j < n; ++j) {
                lo = std::min(lo, v[j * e + c]);
                hi = std::max(hi, v[j * e + c]);
            }
            for (int i = 0; i < m; ++i) {
                CHECK(out.value()[i * e + c] >= lo - 1e-12);
                CHECK(out.value()[i * e + c] <= hi + 1e-12);
            }
        }
    }
}

TEST_CASE("attention saturates on an aligned key") {
    const int e = 4;
    std::vector<double> k(16, 0.0), v(16), q(4, 0.0);
    for (int j = 0; j < 4; ++j) k[j * e + j] = 1.0;
    for (int j = 0; j < 16; ++j) v[j] = 0.1 * j;
    q[2] = 1e3;
    ag::Var out = ag::multihead_attention(ag::Var::constant({1, e}, q), ag::Var::constant({4, e}, k),
                                          ag::Var::constant({4, e}, v), 1);
    for (int c = 0; c < e; ++c) CHECK(std::abs(out.value()[c] - v[2 * e + c]) <= 1e-9);
}

TEST_CASE("constant values give a constant output") {
    std::mt19937_64 rng(3);
    auto q = testing::random_vector(rng, 6 * 4), k = testing::random_vector(rng, 9 * 4);
    ag::Var out = ag::multihead_attention(ag::Var::constant({6, 4}, q), ag::Var::constant({9, 4}, k),
                                          ag::Var::constant({9, 4}, std::vector<double>(36, 0.37)), 2);
    for (double x : out.value()) CHECK(std::abs(x - 0.37) <= 1e-12);
}

TEST_CASE("jointly permuting key/value tokens leaves the output unchanged") {
    std::mt19937_64 rng(4);
    const int m = 7, n = 11, e = 8;
    auto q = testing::random_vector(rng, m * e), k = testing::random_vector(rng, n * e),
         v = testing::random_vector(rng, n * e);
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> kp(k.size()), vp(v.size());
    for (int j = 0; j < n; ++j)
        for (int c = 0; c < e; ++c) {
            kp[j * e + c] = k[perm[j] * e + c];
            vp[j * e + c] = v[perm[j] * e + c];
        }
    auto run = [&](const std::vector<double>& kk, const std::vector<double>& vv) {
        return ag::multihead_attention(ag::Var::constant({m, e}, q), ag::Var::constant({n, e}, kk),
                                       ag::Var::constant({n, e}, vv), 4);
    };
    ag::Var a = run(k, v), b = run(kp, vp);
    for (int i = 0; i < m * e; ++i) CHECK(std::abs(a.value()[i] - b.value()[i]) <= 1e-6);
}

TEST_CASE("attention gradients on a four-token eight-wide instance") {
    std::mt19937_64 rng(5);
    ag::Var q = testing::random_param(rng, {4, 8}), k = testing::random_param(rng, {4, 8}),
            v = testing::random_param(rng, {4, 8});
    ag::Var w = ag::Var::constant({4, 8}, testing::random_vector(rng, 32));
    auto f = [&] { return ag::sum(ag::mul(ag::multihead_attention(q, k, v, 2), w)); };
    CHECK(testing::grad_check(f, {q, k, v}).rel_error <= 1e-4);

    // through the learned projections of one pyramid level (2×2 map → 4 tokens)
    ParamStore store;
    MaskAttention att(tiny_backbone(), tiny_attention(), store, rng);
    ag::Var qf = testing::random_param(rng, {8, 2, 2}), sf = testing::random_param(rng, {8, 2, 2});
    Mask2D mask(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 10; ++x) mask.at(y, x) = 1;
    ag::Var probe = ag::Var::constant({2, 2, 2}, testing::random_vector(rng, 8));
    auto g = [&] { return ag::sum(ag::mul(att.scaled_attention(1, att.build_tokens(1, qf, {sf}, {mask})), probe)); };
    std::vector<ag::Var> params{qf, sf};
    for (const auto& [name, p] : store.entries())
        if (name.starts_with("attention.l2.")) params.push_back(p);
    CHECK(testing::grad_check(g, params).rel_error <= 1e-4);
}

TEST_CASE("per-support mask feature aggregates scales by upsample and sum") {
    std::mt19937_64 rng(6);
    ParamStore store;
    MaskAttention att(tiny_backbone(), tiny_attention(), store, rng);
    FeaturePyramid qp, sp;
    qp.levels = {testing::random_param(rng, {8, 8, 8}), testing::random_param(rng, {8, 4, 4})};
    sp.levels = {testing::random_param(rng, {8, 8, 8}), testing::random_param(rng, {8, 4, 4})};
    qp.strides = sp.strides = {4, 8};
    Mask2D mask = testing::random_disc(rng, 32, 32, 8);

    ag::Var a = att.scaled_attention(0, att.build_tokens(0, qp.levels[0], {sp.levels[0]}, {mask}));
    ag::Var b = att.scaled_attention(1, att.build_tokens(1, qp.levels[1], {sp.levels[1]}, {mask}));
    ag::Var expect = ag::add(a, ag::upsample_bilinear(b, 8, 8));
    ag::Var agg = att.aggregate(qp, {sp}, {mask});
    REQUIRE(agg.shape() == ag::Shape{2, 8, 8});
    for (int i = 0; i < 128; ++i) CHECK(agg.value()[i] == doctest::Approx(expect.value()[i]).epsilon(1e-12));

    MaskFeature mf = att.per_support(qp, {sp}, {mask});
    MaskFeature again = att.per_support(qp, {sp}, {mask});
    CHECK(mf.stride == 4);
    CHECK(mf.logits.shape() == ag::Shape{2, 8, 8});
    const auto h = testing::values(att.head(agg));
    for (int i = 0; i < 128; ++i) {
        CHECK(mf.logits.value()[i] == h[i]);
        CHECK(mf.logits.value()[i] == again.logits.value()[i]);
    }
}

TEST_CASE("single-level config reduces to the head of one attention map") {
    BackboneConfig bb;
    bb.input_size = 16;
    bb.in_channels = 1;
    bb.channels = {8};
    ParamStore store;
    std::mt19937_64 rng(7);
    MaskAttention att(bb, tiny_attention(), store, rng);
    FeaturePyramid qp, sp;
    qp.levels = {testing::random_param(rng, {8, 4, 4})};
    sp.levels = {testing::random_param(rng, {8, 4, 4})};
    qp.strides = sp.strides = {4};
    Mask2D mask = testing::random_disc(rng, 16, 16, 4);
    ag::Var a = att.scaled_attention(0, att.build_tokens(0, qp.levels[0], {sp.levels[0]}, {mask}));
    const auto expect = testing::values(att.head(a));
    const auto got = testing::values(att.per_support(qp, {sp}, {mask}).logits);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == expect[i]);
}

TEST_CASE("inference attention matches the recorded path on many rows") {
    std::mt19937_64 rng(8);
    const int m = 150, n = 97, e = 8;
    auto q = testing::random_vector(rng, m * e), k = testing::random_vector(rng, n * e),
         v = testing::random_vector(rng, n * e);
    std::vector<double> probs;
    const auto recorded = testing::values(ag::multihead_attention(
        ag::Var::constant({m, e}, q), ag::Var::constant({n, e}, k), ag::Var::constant({n, e}, v), 2, &probs));
    ag::NoGradGuard guard;
    const auto blocked = testing::values(ag::multihead_attention(
        ag::Var::constant({m, e}, q), ag::Var::constant({n, e}, k), ag::Var::constant({n, e}, v), 2));
    for (int i = 0; i < m * e; ++i) CHECK(std::abs(recorded[i] - blocked[i]) <= 1e-12);
}
