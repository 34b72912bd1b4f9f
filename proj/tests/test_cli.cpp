#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "msfseg/checkpoint.hpp"
#include "msfseg/cli.hpp"
#include "msfseg/dataset.hpp"
#include "msfseg/metrics.hpp"
#include "msfseg/synth.hpp"

namespace fs = std::filesystem;
using namespace msf;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag)
        : path(fs::temp_directory_path() / ("msfseg_" + tag + "_" + std::to_string(::getpid()))) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> data_rows(const std::string& log) {
    std::vector<std::string> rows;
    std::istringstream in(log);
    for (std::string line; std::getline(in, line);)
        if (!line.empty() && line[0] != '#' && line.rfind("step", 0) != 0) rows.push_back(line);
    return rows;
}

const std::vector<std::string> kTrain{"train", "--synthetic", "--synth-volumes", "3", "--synth-depth", "6",
                                      "--size", "32", "--batch", "2", "--n", "3", "--vary-n", "--min-area", "10"};

std::vector<std::string> with(std::vector<std::string> base, std::initializer_list<std::string> extra) {
    base.insert(base.end(), extra);
    return base;
}

}  // namespace

TEST_CASE("generate writes a reloadable, reproducible dataset") {
    TempDir tmp("gen");
    const std::vector<std::string> args{"generate", "--volumes", "2", "--depth", "5", "--size", "24", "--seed", "3"};
    REQUIRE(cli(with(args, {"--out", tmp / "a"})).code == kExitOk);
    REQUIRE(cli(with(args, {"--out", tmp / "b"})).code == kExitOk);
    const Dataset ds = load_dataset(tmp / "a");
    CHECK(ds.volumes.size() == 2);
    CHECK(ds.volumes[0].depth == 5);
    CHECK(ds.test_classes == synth_test_classes());
    CHECK(ds.config.at("seed") == 3);
    for (const auto& v : ds.volumes)
        CHECK(slurp(tmp / ("a/" + v.id + ".msfvol")) == slurp(tmp / ("b/" + v.id + ".msfvol")));
}

TEST_CASE("usage errors map to exit code 2") {
    TempDir tmp("usage");
    CHECK(cli({}).code == kExitUsage);
    CHECK(cli({"frobnicate"}).code == kExitUsage);
    CHECK(cli({"train", "--steps", "banana"}).code == kExitUsage);
    CHECK(cli({"train", "--help"}).code == kExitOk);

    const Run missing = cli({"propagate", "--checkpoint", tmp / "none.ckpt", "--data", tmp / "none", "--out", tmp / "o"});
    CHECK(missing.code == kExitUsage);
    CHECK(missing.err.find("not found") != std::string::npos);

    CHECK(cli({"train", "--data", tmp / "nowhere", "--out", tmp / "m"}).code == kExitUsage);
    CHECK(cli(with(kTrain, {"--steps", "1", "--setting", "3", "--out", tmp / "m"})).code == kExitUsage);

    std::ofstream(tmp / "bad.json") << R"({"steps": 1, "stepz": 2})";
    const Run unknown = cli(with(kTrain, {"--config", tmp / "bad.json", "--out", tmp / "m"}));
    CHECK(unknown.code == kExitUsage);
    CHECK(unknown.err.find("stepz") != std::string::npos);

    std::ofstream(tmp / "type.json") << R"({"steps": "many"})";
    CHECK(cli(with(kTrain, {"--config", tmp / "type.json", "--out", tmp / "m"})).code == kExitUsage);
}

TEST_CASE("train: config file, determinism and resume") {
    TempDir tmp("train");
    std::ofstream(tmp / "cfg.json") << R"({"steps": 4, "lr": 0.002, "seed": 7})";
    REQUIRE(cli(with(kTrain, {"--config", tmp / "cfg.json", "--out", tmp / "a.ckpt"})).code == kExitOk);
    REQUIRE(cli(with(kTrain, {"--config", tmp / "cfg.json", "--out", tmp / "b.ckpt", "--log", tmp / "a.ckpt.log2"}))
                .code == kExitOk);
    const Checkpoint a = load_checkpoint(tmp / "a.ckpt");
    CHECK(a.step == 4);
    CHECK(a.losses.size() == 4);
    CHECK(a.run_config.at("lr") == 0.002);
    CHECK(a.run_config.at("seed") == 7);
    const Checkpoint b = load_checkpoint(tmp / "b.ckpt");
    CHECK(a.params == b.params);
    CHECK(a.moments == b.moments);
    CHECK(data_rows(slurp(tmp / "a.ckpt.log")) == data_rows(slurp(tmp / "a.ckpt.log2")));
    CHECK(data_rows(slurp(tmp / "a.ckpt.log")).size() == 4);
    CHECK(slurp(tmp / "a.ckpt.log").find("# config {") != std::string::npos);

    // flags override the file
    REQUIRE(cli(with(kTrain, {"--config", tmp / "cfg.json", "--steps", "2", "--out", tmp / "half.ckpt"})).code == kExitOk);
    CHECK(load_checkpoint(tmp / "half.ckpt").step == 2);
    // a repeated option keeps its last value
    REQUIRE(cli(with(kTrain, {"--steps", "5", "--steps", "1", "--out", tmp / "x", "--out", tmp / "one.ckpt"})).code == kExitOk);
    CHECK(load_checkpoint(tmp / "one.ckpt").step == 1);
    CHECK_FALSE(fs::exists(tmp / "x"));

    REQUIRE(cli(with(kTrain, {"--config", tmp / "cfg.json", "--resume", tmp / "half.ckpt", "--out", tmp / "r.ckpt"}))
                .code == kExitOk);
    const Checkpoint r = load_checkpoint(tmp / "r.ckpt");
    CHECK(r.params == a.params);
    CHECK(r.moments == a.moments);
    CHECK(r.losses == a.losses);
    CHECK(data_rows(slurp(tmp / "r.ckpt.log")) == data_rows(slurp(tmp / "a.ckpt.log")));

    const Run mismatch =
        cli(with(kTrain, {"--config", tmp / "cfg.json", "--heads", "2", "--resume", tmp / "half.ckpt", "--out", tmp / "x"}));
    CHECK(mismatch.code == kExitUsage);
}

TEST_CASE("propagate and evaluate") {
    TempDir tmp("prop");
    REQUIRE(cli({"generate", "--out", tmp / "ds", "--volumes", "3", "--depth", "6", "--size", "32", "--seed", "8"}).code ==
            kExitOk);
    REQUIRE(cli(with(kTrain, {"--steps", "2", "--out", tmp / "m.ckpt"})).code == kExitOk);
    const std::vector<std::string> base{"propagate", "--checkpoint", tmp / "m.ckpt", "--data", tmp / "ds", "--n", "2",
                                        "--qc", "off"};

    SUBCASE("inter mode outputs are reproducible") {
        REQUIRE(cli(with(base, {"--out", tmp / "r1"})).code == kExitOk);
        REQUIRE(cli(with(base, {"--out", tmp / "r2"})).code == kExitOk);
        for (const auto* f : {"selection.log", "report.tsv", "report.json", "pool.msfpool",
                              "masks/synth_001.msfvol", "masks/synth_002.msfvol"})
            CHECK(slurp(tmp / (std::string("r1/") + f)) == slurp(tmp / (std::string("r2/") + f)));
        Json c1 = Json::parse(slurp(tmp / "r1/config.json")), c2 = Json::parse(slurp(tmp / "r2/config.json"));
        c1.erase("out");
        c2.erase("out");
        CHECK(c1 == c2);
        CHECK_FALSE(fs::exists(tmp / "r1/masks/synth_000.msfvol"));

        const Volume pred = load_volume(tmp / "r1/masks/synth_001.msfvol");
        REQUIRE(pred.classes.size() == 1);
        CHECK(pred.classes[0].id == kTube);

        std::istringstream sel(slurp(tmp / "r1/selection.log"));
        int lines = 0;
        for (std::string l; std::getline(sel, l); ++lines) CHECK(l.rfind("volume=synth_00", 0) == 0);
        CHECK(lines == 12);

        const MetricReport report = MetricReport::from_json(slurp(tmp / "r1/report.json"));
        CHECK(report.rows.size() == 2);

        const Run ev = cli({"evaluate", "--pred", tmp / "r1", "--gt", tmp / "ds", "--out", tmp / "ev.json"});
        REQUIRE(ev.code == kExitOk);
        CHECK(MetricReport::from_json(slurp(tmp / "ev.json")).rows == report.rows);

        const Run two = cli({"evaluate", "--pred", tmp / "r1", "--pred", tmp / "r2", "--gt", tmp / "ds", "--out",
                             tmp / "ev2.json"});
        REQUIRE(two.code == kExitOk);
        CHECK(MetricReport::from_json(slurp(tmp / "ev2.json")).rows == report.rows);
    }

    SUBCASE("intra mode excludes the labeled slices from scoring") {
        REQUIRE(cli(with(base, {"--mode", "intra", "--volumes", "synth_001", "--out", tmp / "in"})).code == kExitOk);
        CHECK(fs::exists(tmp / "in/pools/synth_001.msfpool"));
        const MetricReport rep = MetricReport::from_json(slurp(tmp / "in/report.json"));
        REQUIRE(rep.rows.size() == 1);
        CHECK(rep.rows[0].volume == "synth_001");
    }

    SUBCASE("evaluate rejects empty and misaligned predictions") {
        fs::create_directories(tmp / "empty");
        const Run empty = cli({"evaluate", "--pred", tmp / "empty", "--gt", tmp / "ds"});
        CHECK(empty.code == kExitFailure);
        CHECK(empty.err.find("no predicted volumes") != std::string::npos);

        SynthConfig c;
        c.volumes = 1;
        c.depth = 4;
        c.size = 32;
        fs::create_directories(tmp / "odd");
        save_volume(generate_corpus(c, "synth").front(), tmp / "odd/synth_000.msfvol");
        save_volume(generate_corpus(c, "alien").front(), tmp / "odd/alien_000.msfvol");
        const Run bad = cli({"evaluate", "--pred", tmp / "odd", "--gt", tmp / "ds"});
        CHECK(bad.code == kExitFailure);
        CHECK(bad.err.find("synth_000 (shape 4x32x32 vs 6x32x32)") != std::string::npos);
        CHECK(bad.err.find("alien_000 (no ground truth)") != std::string::npos);
    }

    SUBCASE("reference and target must differ") {
        CHECK(cli(with(base, {"--reference", "synth_001", "--volumes", "synth_001", "--out", tmp / "x"})).code ==
              kExitUsage);
        CHECK(cli(with(base, {"--mode", "sideways", "--out", tmp / "x"})).code == kExitUsage);
    }
}
