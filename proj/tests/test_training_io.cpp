#include <doctest.h>

#include <cmath>
#include <set>

#include "msfseg/checkpoint.hpp"
#include "msfseg/driver.hpp"
#include "msfseg/errors.hpp"
#include "msfseg/synth.hpp"

using namespace msf;

namespace {

std::vector<Volume> tiny_corpus() {
    SynthConfig c;
    c.volumes = 3;
    c.depth = 6;
    c.size = 32;
    c.tubes = 0;
    c.blobs = 3;
    c.seed = 9;
    return generate_corpus(c, "t");
}

EpisodicConfig tiny_run(int steps) {
    EpisodicConfig c;
    c.steps = steps;
    c.batch = 2;
    c.n = 3;
    c.vary_n = true;
    c.train_classes = synth_train_classes();
    c.test_classes = synth_test_classes();
    c.min_area = 10;
    c.lr = 1e-3;
    c.seed = 4;
    return c;
}

std::vector<double> flat_params(const MsfSegModel& m) {
    std::vector<double> out;
    for (const auto& t : capture(m).params) out.insert(out.end(), t.values.begin(), t.values.end());
    return out;
}

}  // namespace

TEST_CASE("checkpoint round trip and malformed files") {
    MsfSegModel model(ModelConfig::desk(32), 3);
    Trainer trainer(model, tiny_run(1).trainer_config());
    const auto corpus = tiny_corpus();
    train_step(trainer, model, corpus, tiny_run(1), 0);

    Checkpoint ck = capture(model, &trainer.optimizer());
    ck.step = 1;
    ck.losses = {0.5};
    ck.run_config = {{"k", 1}};
    CHECK(ck.has_optimizer);
    const auto bytes = encode_checkpoint(ck);
    CHECK(decode_checkpoint(bytes) == ck);

    auto truncated = bytes;
    truncated.resize(bytes.size() - 5);
    CHECK_THROWS_AS(decode_checkpoint(truncated), FormatError);
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);

    const auto copy = instantiate(ck);
    CHECK(flat_params(*copy) == flat_params(model));

    MsfSegModel other(ModelConfig::desk(48), 3);
    CHECK_THROWS_AS(restore(ck, other), ConfigError);

    Json j = model_config_to_json(ModelConfig::desk(32));
    CHECK(model_config_from_json(j) == ModelConfig::desk(32));
    j["surprise"] = 1;
    CHECK_THROWS_AS(model_config_from_json(j), ConfigError);
}

TEST_CASE("resumed training continues bit-identically") {
    const auto corpus = tiny_corpus();
    const EpisodicConfig cfg = tiny_run(4);

    MsfSegModel straight(ModelConfig::desk(32), 5);
    Trainer t1(straight, cfg.trainer_config());
    std::vector<double> losses;
    for (int s = 0; s < 4; ++s) losses.push_back(train_step(t1, straight, corpus, cfg, s).loss);

    MsfSegModel first(ModelConfig::desk(32), 5);
    Trainer t2(first, cfg.trainer_config());
    std::vector<double> resumed;
    for (int s = 0; s < 2; ++s) resumed.push_back(train_step(t2, first, corpus, cfg, s).loss);
    Checkpoint ck = capture(first, &t2.optimizer());
    ck.step = 2;
    const Checkpoint back = decode_checkpoint(encode_checkpoint(ck));

    auto second = instantiate(back);
    Trainer t3(*second, cfg.trainer_config());
    restore(back, *second, &t3.optimizer());
    for (int s = 2; s < 4; ++s) resumed.push_back(train_step(t3, *second, corpus, cfg, s).loss);

    CHECK(resumed == losses);
    CHECK(flat_params(*second) == flat_params(straight));
    CHECK(t3.optimizer().steps() == t1.optimizer().steps());
}

TEST_CASE("schedule, step seeds and batch sampling") {
    EpisodicConfig c = tiny_run(11);
    CHECK(learning_rate(c, 0) == c.lr);
    CHECK(learning_rate(c, 10) == c.lr);
    c.schedule = Schedule::cosine;
    c.min_lr = 1e-5;
    CHECK(learning_rate(c, 0) == doctest::Approx(c.lr));
    CHECK(learning_rate(c, 5) == doctest::Approx(0.5 * (c.lr + c.min_lr)));
    CHECK(learning_rate(c, 10) == doctest::Approx(c.min_lr));
    for (int s = 1; s < 11; ++s) CHECK(learning_rate(c, s) <= learning_rate(c, s - 1));

    std::set<std::uint64_t> seeds;
    for (int s = 0; s < 1000; ++s) seeds.insert(step_seed(4, s));
    CHECK(seeds.size() == 1000);
    CHECK(step_seed(4, 7) != step_seed(5, 7));

    const auto corpus = tiny_corpus();
    std::set<int> ns;
    for (int s = 0; s < 20; ++s) {
        std::vector<Episode> eps;
        const auto b = episode_batch(corpus, c, s, 32, &eps);
        REQUIRE(b.size() == 2);
        CHECK(static_cast<int>(b.front().supports.size()) == batch_n(c, s));
        ns.insert(batch_n(c, s));
        const auto again = episode_batch(corpus, c, s, 32);
        CHECK(again.front().query == b.front().query);
        CHECK(again.back().gt == b.back().gt);
    }
    CHECK(ns == std::set<int>{1, 2, 3});

    c.train_classes.clear();
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("episode evaluation is deterministic and bounded") {
    const auto corpus = tiny_corpus();
    MsfSegModel model(ModelConfig::desk(32), 2);
    EpisodeSpec spec;
    spec.class_id = kBlobA;
    spec.n = 2;
    spec.min_area = 10;
    const auto a = evaluate_episodes(model, corpus, spec, 6, 11);
    const auto b = evaluate_episodes(model, corpus, spec, 6, 11);
    REQUIRE(a.size() == 6);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].dice == b[i].dice);
        CHECK(a[i].dice >= 0.0);
        CHECK(a[i].dice <= 1.0);
        CHECK(a[i].episode.supports.size() == 2);
    }
    CHECK(mean_dice({}) == 0.0);
}
