#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "msfseg/errors.hpp"
#include "msfseg/propagation.hpp"
#include "msfseg/synth.hpp"
#include "oracle_segmenter.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace msf;
using msf::testing::OracleSegmenter;

namespace {

PooledDescriptor desc(std::vector<double> v) {
    PooledDescriptor d;
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    d.zero_norm = n == 0;
    for (double& x : v) x = d.zero_norm ? 0.0 : x / n;
    d.vector = std::move(v);
    return d;
}

PoolEntry entry(const std::string& vol, int z, std::vector<double> v, Provenance p = Provenance::ground_truth) {
    PoolEntry e;
    e.slice = Image2D(2, 2, 0.5);
    e.mask = Mask2D(2, 2, 1);
    e.descriptor = desc(std::move(v));
    e.provenance = p;
    e.source = {vol, z};
    return e;
}

SynthConfig tube_config(std::uint64_t seed, int volumes = 3) {
    SynthConfig cfg;
    cfg.volumes = volumes;
    cfg.depth = 8;
    cfg.size = 24;
    cfg.blobs = 0;
    cfg.tube_radius = {3.0, 4.0};
    cfg.seed = seed;
    return cfg;
}

ModelConfig mini_config() {
    ModelConfig cfg;
    cfg.backbone.input_size = 16;
    cfg.backbone.in_channels = 1;
    cfg.backbone.channels = {8, 8};
    cfg.attention.heads = 2;
    cfg.attention.head_channels = 4;
    cfg.fusion.out_channels = 4;
    cfg.decoder.channels = {8, 8};
    return cfg;
}

}  // namespace

TEST_CASE("support pool bookkeeping") {
    SupportPool pool(7);
    CHECK(pool.add({entry("a", 0, {1, 0}), entry("a", 1, {0, 1})}) == 0);
    CHECK(pool.version() == 1);
    CHECK(pool.add({entry("b", 0, {1, 1})}) == 2);
    CHECK(pool[2].ordinal == 2);
    CHECK(pool.find({"a", 1}) == 1);
    CHECK(pool.find({"c", 0}) == -1);

    CHECK_THROWS_AS(pool.add({entry("c", 0, {1, 0}), entry("a", 0, {1, 0})}), InputError);
    CHECK_THROWS_AS(pool.add({entry("c", 0, {1, 0}), entry("c", 0, {1, 0})}), InputError);
    PoolEntry bad = entry("c", 1, {1, 0});
    bad.mask = Mask2D(3, 2, 0);
    CHECK_THROWS_AS(pool.add({bad}), InputError);
    // failed adds are all-or-nothing
    CHECK(pool.size() == 3);
    CHECK(pool.version() == 2);
    CHECK_FALSE(pool.contains({"c", 0}));

    CHECK_NOTHROW(pool.check_fingerprint(7));
    CHECK_THROWS_AS(pool.check_fingerprint(8), ConfigError);
}

TEST_CASE("init_pool") {
    OracleSegmenter seg;
    std::mt19937_64 rng(1);
    LabeledSequence ls{"v", 3, {}};
    for (int k = 0; k < 5; ++k) {
        ls.data.slices.push_back(testing::random_image(rng, 8, 8));
        ls.data.masks.push_back(testing::random_mask(rng, 8, 8));
    }
    SupportPool pool = init_pool(seg, {ls});
    REQUIRE(pool.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(pool[i].provenance == Provenance::ground_truth);
        CHECK(pool[i].source == SourceRef{"v", 3 + static_cast<int>(i)});
        CHECK(pool[i].sequence == 0);
    }
    CHECK(pool.fingerprint() == seg.fingerprint());

    CHECK_THROWS_AS(init_pool(seg, {}), InputError);
    CHECK_THROWS_AS(init_pool(seg, {ls, ls}), InputError);

    SUBCASE("descriptors match the model's pooled descriptor") {
        MsfSegModel model(mini_config(), 3);
        ModelSegmenter ms(model);
        SupportPool p = init_pool(ms, {ls});
        for (std::size_t i = 0; i < p.size(); ++i) {
            ag::NoGradGuard ng;
            const auto ref = pooled_descriptor(model.extract(resize_linear(p[i].slice, 16, 16)));
            CHECK(p[i].descriptor.vector == ref.vector);
        }
        CHECK(p.fingerprint() == model.backbone_fingerprint());
    }
}

TEST_CASE("select_supports ranks by cosine with ordinal tie-break") {
    SupportPool pool;
    pool.add({entry("v", 0, {1, 0, 0}), entry("v", 1, {0, 1, 0}), entry("v", 2, {0, 0, 1})});
    CHECK(select_supports(pool, desc({0.1, 1, 0}), 1) == std::vector<std::size_t>{1});
    CHECK(select_supports(pool, desc({0.2, 1, 0.1}), 10) == std::vector<std::size_t>{1, 0, 2});
    // exact tie between entries 0 and 2 resolves to the smaller ordinal
    CHECK(select_supports(pool, desc({1, 0, 1}), 2) == std::vector<std::size_t>{0, 2});
    CHECK_THROWS_AS(select_supports(pool, desc({1, 0, 0}), 0), InputError);
    CHECK_THROWS_AS(select_supports(SupportPool{}, desc({1, 0, 0}), 1), InputError);

    std::mt19937_64 rng(9);
    std::uniform_int_distribution<int> coarse(-2, 2);
    for (int trial = 0; trial < 40; ++trial) {
        SupportPool big;
        std::vector<PoolEntry> es;
        for (int i = 0; i < 50; ++i) {
            // coarse integer descriptors make exact ties common
            std::vector<double> v(4);
            for (auto& x : v) x = coarse(rng);
            es.push_back(entry("v", i, v));
        }
        // shuffle insertion so ordinals are not tied to the source order
        std::shuffle(es.begin(), es.end(), rng);
        big.add(es);
        std::vector<double> q(4);
        for (auto& x : q) x = coarse(rng);
        const auto oracle = testing::brute_force_rank(big, desc(q));
        const auto got = select_supports(big, desc(q), 5);
        CHECK(got == std::vector<std::size_t>(oracle.begin(), oracle.begin() + 5));
        CHECK(rank_pool(big, desc(q)) == oracle);
        double min_sel = 2, max_rest = -2;
        for (std::size_t i = 0; i < big.size(); ++i) {
            const double s = cosine_similarity(big[i].descriptor, desc(q));
            if (std::find(got.begin(), got.end(), i) != got.end())
                min_sel = std::min(min_sel, s);
            else
                max_rest = std::max(max_rest, s);
        }
        CHECK(min_sel >= max_rest);
    }
}

TEST_CASE("sequence selection takes disjoint consecutive windows") {
    SupportPool pool;
    std::vector<PoolEntry> es;
    for (int z = 0; z < 10; ++z) es.push_back(entry("a", z, {1.0, 0.1 * z}));
    for (int z : {0, 1, 3, 4, 5}) es.push_back(entry("b", z, {0.0, 1.0 + z}));
    pool.add(es);

    const Selection sel = select_sequences(pool, desc({1, 0.55}), 5, 3);
    REQUIRE(sel.groups.size() >= 3);
    std::set<std::size_t> used;
    for (std::size_t g = 0; g < sel.groups.size(); ++g) {
        const auto& grp = sel.groups[g];
        REQUIRE(grp.size() == 3);
        CHECK(std::find(grp.begin(), grp.end(), sel.anchors[g]) != grp.end());
        for (std::size_t k = 0; k < grp.size(); ++k) {
            CHECK(used.insert(grp[k]).second);
            CHECK(pool[grp[k]].source.volume == pool[grp[0]].source.volume);
            CHECK(pool[grp[k]].source.slice == pool[grp[0]].source.slice + static_cast<int>(k));
        }
    }
    // ranking starts a:6, a:5, a:7, a:4, a:8; a:8 has no free window left; b:3..5 is b's only run
    auto first_of = [&](std::size_t g) { return pool[sel.groups[g][0]].source; };
    REQUIRE(sel.groups.size() == 3);
    CHECK(first_of(0) == SourceRef{"a", 5});
    CHECK(first_of(1) == SourceRef{"a", 2});
    CHECK(first_of(2) == SourceRef{"b", 3});
    CHECK(sel.truncated());
    CHECK(gather(pool, sel)[0].depth() == 3);

    SupportPool gaps;
    gaps.add({entry("c", 0, {1, 0}), entry("c", 2, {1, 0})});
    CHECK_THROWS_AS(select_sequences(gaps, desc({1, 0}), 1, 2), InputError);
}

TEST_CASE("quality check predicate") {
    PoolEntry top = entry("v", 0, {1});
    top.mask = Mask2D(10, 10);
    for (int i = 0; i < 20; ++i) top.mask.bits[i] = 1;
    auto result = [](std::size_t area, double conf) {
        SliceResult r{Mask2D(10, 10), conf};
        for (std::size_t i = 0; i < area; ++i) r.mask.bits[i] = 1;
        return r;
    };
    QCPolicy qc;
    CHECK(quality_check(qc, result(20, 0.9), top).pass);
    CHECK_FALSE(quality_check(qc, result(0, 0.9), top).pass);
    CHECK_FALSE(quality_check(qc, result(20, 0.84), top).pass);
    CHECK(quality_check(qc, result(5, 0.9), top).pass);
    CHECK_FALSE(quality_check(qc, result(4, 0.9), top).pass);
    CHECK(quality_check(qc, result(80, 0.9), top).pass);
    CHECK_FALSE(quality_check(qc, result(81, 0.9), top).pass);
    CHECK(quality_check(qc, result(40, 0.9), top).area_ratio == doctest::Approx(2.0));
    qc.enabled = false;
    CHECK(quality_check(qc, result(0, 0.0), top).pass);
    qc.ratio_lo = 5;
    CHECK_THROWS_AS(qc.validate(), ConfigError);
}

TEST_CASE("central sequences") {
    SynthConfig cfg = tube_config(4, 1);
    cfg.depth = 12;
    const Volume v = generate_volume(cfg, 4, "c");
    auto one = central_sequences(v, kTube, 1, 1);
    REQUIRE(one.size() == 1);
    CHECK(one[0].first == 6);
    auto three = central_sequences(v, kTube, 3, 3);
    REQUIRE(three.size() == 3);
    CHECK(three[0].first == 1);
    CHECK(three[1].first == 5);
    CHECK(three[2].first == 9);
    CHECK(three[2].data.masks[0] == v.mask(9, kTube));
    CHECK_THROWS_AS(central_sequences(v, kTube, 5, 3), InputError);
    CHECK_THROWS_AS(central_sequences(v, kBlobA, 1, 1), InputError);
}

TEST_CASE("segment_volume and propagate_dataset") {
    const auto vols = generate_corpus(tube_config(11));
    OracleSegmenter seg;
    PropagationConfig cfg;
    cfg.qc.enabled = false;

    SUBCASE("pixel-identical slices select their pooled twin first") {
        Volume copy = vols[0];
        copy.id = "copy";
        SupportPool pool = init_pool(seg, {labeled_sequence(vols[0], kTube, 0, vols[0].depth)});
        const auto before = pool.size();
        VolumeResult r = segment_volume(copy, pool, seg, cfg);
        for (int z = 0; z < copy.depth; ++z) {
            CHECK(pool[r.slices[z].selection.anchors[0]].source == SourceRef{vols[0].id, z});
            CHECK(r.slices[z].result.mask == vols[0].mask(z, kTube));
        }
        CHECK(pool.size() == before + static_cast<std::size_t>(copy.depth));
        CHECK(r.added == static_cast<std::size_t>(copy.depth));
    }
    SUBCASE("real model: identical slices still rank their twin first") {
        MsfSegModel model(mini_config(), 5);
        ModelSegmenter ms(model);
        Volume copy = vols[1];
        copy.id = "copy";
        SupportPool pool = init_pool(ms, {labeled_sequence(vols[1], kTube, 0, vols[1].depth)});
        VolumeResult r = segment_volume(copy, pool, ms, cfg);
        for (int z = 0; z < copy.depth; ++z) CHECK(pool[r.slices[z].selection.anchors[0]].source.slice == z);

        SupportPool foreign = init_pool(seg, {labeled_sequence(vols[1], kTube, 0, 1)});
        CHECK_THROWS_AS(segment_volume(copy, foreign, ms, cfg), ConfigError);
    }
    SUBCASE("impossible threshold leaves the pool unchanged") {
        SupportPool pool = init_pool(seg, central_sequences(vols[0], kTube, 1, 1));
        PropagationConfig strict;
        strict.qc.tau = 1.01;
        const auto version = pool.version();
        VolumeResult r = segment_volume(vols[1], pool, seg, strict);
        CHECK(pool.size() == 1);
        CHECK(pool.version() == version);
        CHECK(r.rejected == static_cast<std::size_t>(vols[1].depth));
        CHECK(r.masks().size() == static_cast<std::size_t>(vols[1].depth));
    }
    SUBCASE("single-slice volume with its own label reproduces the ground truth") {
        Volume one = vols[0];
        one.depth = 1;
        one.intensities.resize(one.plane());
        one.labels.resize(one.plane());
        SupportPool pool = init_pool(seg, {labeled_sequence(one, kTube, 0, 1)});
        auto res = propagate_dataset({one}, pool, seg, cfg);
        CHECK(res[0].slices[0].result.mask == one.mask(0, kTube));
        CHECK(res[0].already_pooled == 1);
        CHECK(pool.size() == 1);
    }
    SUBCASE("pool grows once per volume and never loses entries") {
        for (bool reversed : {false, true}) {
            std::vector<Volume> order(vols.begin() + 1, vols.end());
            if (reversed) std::reverse(order.begin(), order.end());
            SupportPool pool = init_pool(seg, central_sequences(vols[0], kTube, 1, 1));
            const PoolEntry gt = pool[0];
            std::size_t total = 0;
            std::vector<std::uint64_t> versions{pool.version()};
            std::size_t last_size = pool.size();
            propagate_dataset(order, pool, seg, cfg, [&](const Volume& v, const VolumeResult& r, const SupportPool& p) {
                total += static_cast<std::size_t>(v.depth);
                CHECK(r.pool_before == last_size);
                CHECK(p.size() == last_size + r.added);
                for (std::size_t i = last_size; i < p.size(); ++i) {
                    CHECK(p[i].source.volume == v.id);
                    CHECK(p[i].provenance == Provenance::predicted);
                }
                // every slice in a volume saw the same pool
                for (const auto& s : r.slices)
                    for (auto i : s.selection.anchors) CHECK(i < r.pool_before);
                versions.push_back(p.version());
                last_size = p.size();
            });
            CHECK(pool.size() == 1 + total);
            CHECK(versions == std::vector<std::uint64_t>{1, 2, 3});
            CHECK(pool[0].slice == gt.slice);
            CHECK(pool[0].mask == gt.mask);
            CHECK(pool[0].provenance == Provenance::ground_truth);
            CHECK(pool.count(Provenance::ground_truth) == 1);
        }
    }
    SUBCASE("deterministic with the real model and QC on") {
        MsfSegModel model(mini_config(), 8);
        ModelSegmenter ms(model);
        PropagationConfig qc_on;
        qc_on.qc.tau = 0.5;
        qc_on.n = 2;
        auto run = [&] {
            SupportPool pool = init_pool(ms, central_sequences(vols[0], kTube, 2, 1));
            auto res = propagate_dataset({vols[1], vols[2]}, pool, ms, qc_on);
            return std::pair{std::move(pool), res[1].masks()};
        };
        auto [p1, m1] = run();
        auto [p2, m2] = run();
        CHECK(p1 == p2);
        CHECK(m1 == m2);
    }
    SUBCASE("n above pool size uses the whole pool") {
        SupportPool pool = init_pool(seg, central_sequences(vols[0], kTube, 2, 1));
        PropagationConfig many = cfg;
        many.n = 5;
        SliceOutcome o = segment_slice(vols[1].slice(0), pool, seg, many);
        CHECK(o.selection.groups.size() == 2);
        CHECK(o.selection.truncated());
        CHECK(seg.last_supports == 2);
    }
    SUBCASE("sequence supports") {
        SupportPool pool = init_pool(seg, central_sequences(vols[0], kTube, 2, 3));
        PropagationConfig seq = cfg;
        seq.n = 2;
        seq.d = 3;
        VolumeResult r = segment_volume(vols[1], pool, seg, seq);
        for (const auto& s : r.slices) {
            REQUIRE(s.selection.groups.size() == 2);
            for (const auto& g : s.selection.groups) CHECK(g.size() == 3);
        }
    }
}

TEST_CASE("pool file round trip") {
    const auto vols = generate_corpus(tube_config(3, 2));
    OracleSegmenter seg;
    SupportPool pool = init_pool(seg, central_sequences(vols[0], kTube, 1, 3));
    PropagationConfig cfg;
    cfg.qc.enabled = false;
    segment_volume(vols[1], pool, seg, cfg);
    const auto path = (std::filesystem::temp_directory_path() / "msfseg_test_pool.msfpool").string();
    save_pool(pool, path);
    SupportPool back = load_pool(path);
    CHECK(back == pool);
    // the loaded pool keeps issuing fresh ordinals and sequence ids
    SupportPool a = pool, b = back;
    a.add({entry("z", 0, {1})});
    b.add({entry("z", 0, {1})});
    CHECK(a == b);

    auto bytes = encode_pool(pool);
    auto cut = bytes;
    cut.resize(cut.size() / 2);
    CHECK_THROWS_AS(decode_pool(cut), FormatError);
    bytes[3] = '?';
    try {
        decode_pool(bytes);
        FAIL("expected a format error");
    } catch (const FormatError& e) {
        CHECK(e.offset() == 0);
    }
}
