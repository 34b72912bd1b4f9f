#include "msfseg/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "msfseg/checkpoint.hpp"
#include "msfseg/dataset.hpp"
#include "msfseg/driver.hpp"
#include "msfseg/errors.hpp"
#include "msfseg/metrics.hpp"
#include "msfseg/propagation.hpp"
#include "msfseg/service.hpp"
#include "msfseg/synth.hpp"

namespace fs = std::filesystem;

namespace msf {

namespace {

// Option tables. Each command's options are declared once in visit() and drive
// the command-line binding, the JSON echo and the strict JSON config loader.

struct GenerateArgs {
    std::string out;
    std::string prefix = "synth";
    int volumes = 6;
    int depth = 24;
    int size = 64;
    int tubes = 1;
    int blobs = 2;
    int distractors = 0;
    double radius_min = 3.0, radius_max = 5.0;
    double curvature_min = 0.05, curvature_max = 0.2;
    double blob_min = 5.0, blob_max = 12.0;
    double contrast_jitter = 0.08;
    double noise = 0.03;
    double bias = 0.1;
    std::uint64_t seed = 0;

    template <class V>
    void visit(V& v) {
        v("out", out, "output dataset directory");
        v("prefix", prefix, "volume id prefix");
        v("volumes", volumes, "number of volumes");
        v("depth", depth, "slices per volume");
        v("size", size, "in-plane size in voxels");
        v("tubes", tubes, "tubes per volume");
        v("blobs", blobs, "blobs per volume (alternating classes 1 and 2)");
        v("distractors", distractors, "unlabeled ellipsoids of random intensity per volume");
        v("radius_min", radius_min, "smallest tube radius");
        v("radius_max", radius_max, "largest tube radius");
        v("curvature_min", curvature_min, "smallest centreline amplitude (fraction of size)");
        v("curvature_max", curvature_max, "largest centreline amplitude (fraction of size)");
        v("blob_min", blob_min, "smallest blob semi-axis");
        v("blob_max", blob_max, "largest blob semi-axis");
        v("contrast_jitter", contrast_jitter, "per-volume class intensity jitter");
        v("noise", noise, "additive Gaussian noise sigma");
        v("bias", bias, "multiplicative bias field amplitude");
        v("seed", seed, "random seed");
    }
};

struct ModelArgs {
    int size = 64;
    std::vector<int> channels{16, 32, 32};
    int heads = 4;
    int head_channels = 16;
    int fusion_channels = 16;
    std::vector<int> decoder_channels{16, 16};
    bool transposed = false;
    std::uint64_t model_seed = 1;

    template <class V>
    void visit(V& v) {
        v("size", size, "model input size");
        v("channels", channels, "backbone channels per pyramid level");
        v("heads", heads, "attention heads");
        v("head_channels", head_channels, "mask head width");
        v("fusion_channels", fusion_channels, "fusion output channels");
        v("decoder_channels", decoder_channels, "decoder block widths");
        v("transposed", transposed, "transposed-conv decoder upsampling");
        v("model_seed", model_seed, "parameter initialization seed");
    }

    ModelConfig config() const {
        ModelConfig c = ModelConfig::desk(size);
        c.backbone.channels = channels;
        c.attention.heads = heads;
        c.attention.head_channels = head_channels;
        c.fusion.out_channels = fusion_channels;
        c.decoder.channels = decoder_channels;
        c.decoder.transposed = transposed;
        return c;
    }
};

struct TrainArgs {
    std::string data;
    bool synthetic = false;
    int synth_volumes = 16;
    int synth_depth = 12;
    int synth_blobs = 4;
    int synth_distractors = 4;
    double synth_jitter = 0.25;
    std::uint64_t synth_seed = 100;
    std::string out;
    std::string log;
    std::string resume;
    int steps = 200;
    int batch = 4;
    int n = 1;
    bool vary_n = false;
    int d = 1;
    int setting = 1;
    std::vector<int> train_classes;
    std::vector<int> test_classes;
    int min_area = 20;
    bool augment = false;
    double lr = 1e-3;
    std::string schedule = "constant";
    double min_lr = 0.0;
    double w_ce = 1.0, w_dice = 1.0;
    int checkpoint_every = 0;
    std::uint64_t seed = 0;
    ModelArgs model;

    template <class V>
    void visit(V& v) {
        v("data", data, "training dataset directory");
        v("synthetic", synthetic, "train on a generated blob corpus instead of --data");
        v("synth_volumes", synth_volumes, "volumes in the generated corpus");
        v("synth_depth", synth_depth, "slices per generated volume");
        v("synth_blobs", synth_blobs, "blobs per generated volume");
        v("synth_distractors", synth_distractors, "unlabeled distractors per generated volume");
        v("synth_jitter", synth_jitter, "class intensity jitter of the generated corpus");
        v("synth_seed", synth_seed, "seed of the generated corpus");
        v("out", out, "checkpoint path");
        v("log", log, "loss log path (default: <out>.log)");
        v("resume", resume, "continue from this checkpoint");
        v("steps", steps, "total optimizer steps");
        v("batch", batch, "episodes per step");
        v("n", n, "supports per episode");
        v("vary_n", vary_n, "draw n uniformly from 1..n per step");
        v("d", d, "slices per support sequence");
        v("setting", setting, "1: test classes may appear in training slices, 2: they never do");
        v("train_classes", train_classes, "training class ids (default from the dataset)");
        v("test_classes", test_classes, "held-out class ids (default from the dataset)");
        v("min_area", min_area, "class pixels a slice needs to be sampled");
        v("augment", augment, "random transform of every query");
        v("lr", lr, "learning rate");
        v("schedule", schedule, "constant | cosine");
        v("min_lr", min_lr, "cosine schedule floor");
        v("w_ce", w_ce, "cross-entropy weight");
        v("w_dice", w_dice, "soft Dice weight");
        v("checkpoint_every", checkpoint_every, "also write the checkpoint every k steps");
        v("seed", seed, "episode sampling seed");
        model.visit(v);
    }
};

struct PropagateArgs {
    std::string checkpoint;
    std::string data;
    std::string out;
    int class_id = 0;
    std::string mode = "inter";
    int n = 1;
    int d = 1;
    std::string qc = "on";
    double tau = 0.85;
    double ratio_lo = 0.25, ratio_hi = 4.0;
    int labeled = 1;
    std::vector<std::string> reference;
    std::vector<std::string> volumes;
    std::uint64_t seed = 0;

    template <class V>
    void visit(V& v) {
        v("checkpoint", checkpoint, "model checkpoint");
        v("data", data, "dataset directory");
        v("out", out, "output directory");
        v("class", class_id, "class to propagate (default: first test class)");
        v("mode", mode, "intra | inter");
        v("n", n, "supports per slice");
        v("d", d, "slices per support sequence");
        v("qc", qc, "on | off");
        v("tau", tau, "QC confidence threshold");
        v("ratio_lo", ratio_lo, "QC lower area ratio");
        v("ratio_hi", ratio_hi, "QC upper area ratio");
        v("labeled", labeled, "labeled sequences per labeled volume");
        v("reference", reference, "inter mode: labeled volume ids (default: the first volume)");
        v("volumes", volumes, "volumes to segment (default: all, minus references)");
        v("seed", seed, "run seed recorded in the report");
    }
};

struct EvaluateArgs {
    std::vector<std::string> pred;
    std::string gt;
    std::vector<int> classes;
    std::string protocol = "evaluate";
    std::string out;
    int tolerance = -1;
    std::uint64_t seed = 0;

    template <class V>
    void visit(V& v) {
        v("pred", pred, "prediction run directories (one per seed)");
        v("gt", gt, "ground-truth dataset directory");
        v("classes", classes, "classes to score (default: the classes declared by the predictions)");
        v("protocol", protocol, "protocol tag for the report");
        v("out", out, "report JSON path");
        v("tolerance", tolerance, "boundary tolerance in pixels (-1: from the slice diagonal)");
        v("seed", seed, "seed recorded when a run directory has no config echo");
    }
};

struct ServeArgs {
    std::string checkpoint;
    std::string data;
    std::string pool;
    int class_id = 0;
    std::string host = "127.0.0.1";
    int port = 8080;

    template <class V>
    void visit(V& v) {
        v("checkpoint", checkpoint, "model checkpoint");
        v("data", data, "dataset directory");
        v("pool", pool, "initial pool file (optional)");
        v("class", class_id, "class served (default: first test class)");
        v("host", host, "bind address");
        v("port", port, "port (0: any free port)");
    }
};

std::string dashed(std::string name) {
    std::replace(name.begin(), name.end(), '_', '-');
    return "--" + name;
}

struct Binder {
    CLI::App* app;
    template <class T>
    void operator()(const char* name, T& ref, const char* help) {
        if constexpr (std::is_same_v<T, bool>)
            app->add_flag(dashed(name), ref, help);
        else if constexpr (CLI::detail::is_mutable_container<T>::value)
            app->add_option(dashed(name), ref, help);
        else  // a repeated scalar option keeps its last value
            app->add_option(dashed(name), ref, help)->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
};

struct ToJson {
    Json j = Json::object();
    template <class T>
    void operator()(const char* name, T& ref, const char*) {
        j[name] = ref;
    }
};

struct FromJson {
    const Json& j;
    std::vector<std::string> names;
    template <class T>
    void operator()(const char* name, T& ref, const char*) {
        names.push_back(name);
        if (!j.contains(name)) return;
        try {
            j.at(name).get_to(ref);
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(std::string("config: wrong type for '") + name + "'");
        }
    }
};

template <class A>
Json echo(A& a) {
    ToJson t;
    a.visit(t);
    return t.j;
}

template <class A>
void load_config(A& a, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config file not found: " + path);
    Json j;
    try {
        j = Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    FromJson f{j, {}};
    a.visit(f);
    reject_unknown_keys(j, f.names, "config " + path);
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + path.string());
    out << text;
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

std::string fmt(const char* f, double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, x);
    return buf;
}

// ---------------------------------------------------------------- generate

int cmd_generate(GenerateArgs& a, std::ostream& out) {
    require(!a.out.empty(), "generate: --out is required");
    SynthConfig cfg;
    cfg.volumes = a.volumes;
    cfg.depth = a.depth;
    cfg.size = a.size;
    cfg.tubes = a.tubes;
    cfg.blobs = a.blobs;
    cfg.distractors = a.distractors;
    cfg.tube_radius = {a.radius_min, a.radius_max};
    cfg.tube_curvature = {a.curvature_min, a.curvature_max};
    cfg.blob_axes = {a.blob_min, a.blob_max};
    cfg.contrast_jitter = a.contrast_jitter;
    cfg.noise = a.noise;
    cfg.bias = a.bias;
    cfg.seed = a.seed;
    Dataset ds;
    ds.dir = a.out;
    ds.volumes = generate_corpus(cfg, a.prefix);
    ds.classes = synth_classes();
    ds.train_classes = synth_train_classes();
    ds.test_classes = synth_test_classes();
    ds.config = echo(a);
    write_dataset(ds);
    out << "generated " << ds.volumes.size() << " volumes in " << a.out << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------- train

EpisodicConfig episodic_config(const TrainArgs& a, const std::vector<int>& train, const std::vector<int>& test) {
    EpisodicConfig c;
    c.steps = a.steps;
    c.batch = a.batch;
    c.n = a.n;
    c.vary_n = a.vary_n;
    c.d = a.d;
    require(a.setting == 1 || a.setting == 2, "train: --setting must be 1 or 2");
    c.setting = static_cast<Setting>(a.setting);
    c.train_classes = train;
    c.test_classes = test;
    require(a.min_area >= 1, "train: --min-area must be >= 1");
    c.min_area = static_cast<std::size_t>(a.min_area);
    c.augment = a.augment;
    c.lr = a.lr;
    require(a.schedule == "constant" || a.schedule == "cosine", "train: --schedule must be constant or cosine");
    c.schedule = a.schedule == "cosine" ? Schedule::cosine : Schedule::constant;
    c.min_lr = a.min_lr;
    c.w_ce = a.w_ce;
    c.w_dice = a.w_dice;
    c.seed = a.seed;
    c.validate();
    return c;
}

std::string log_row(const StepRecord& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%lld\t%d\t%d\t%.9g\t%.17g\n", static_cast<long long>(r.step), r.n, r.d, r.lr, r.loss);
    return buf;
}

int cmd_train(TrainArgs& a, std::ostream& out) {
    require(!a.out.empty(), "train: --out is required");
    std::vector<Volume> corpus;
    std::vector<int> train = a.train_classes, test = a.test_classes;
    if (a.synthetic) {
        require(a.data.empty(), "train: --synthetic and --data are exclusive");
        SynthConfig sc;
        sc.volumes = a.synth_volumes;
        sc.depth = a.synth_depth;
        sc.size = a.model.size;
        sc.tubes = 0;
        sc.blobs = a.synth_blobs;
        sc.distractors = a.synth_distractors;
        sc.contrast_jitter = a.synth_jitter;
        sc.seed = a.synth_seed;
        corpus = generate_corpus(sc, "train");
        if (train.empty()) train = synth_train_classes();
        if (test.empty()) test = synth_test_classes();
    } else {
        require(!a.data.empty(), "train: --data or --synthetic is required");
        Dataset ds = load_dataset(a.data);
        corpus = std::move(ds.volumes);
        if (train.empty()) train = ds.train_classes;
        if (test.empty()) test = ds.test_classes;
    }
    const EpisodicConfig cfg = episodic_config(a, train, test);
    const ModelConfig mc = a.model.config();
    MsfSegModel model(mc, a.model.model_seed);
    Trainer trainer(model, cfg.trainer_config());

    std::int64_t start = 0;
    std::vector<double> losses;
    if (!a.resume.empty()) {
        require(fs::exists(a.resume), "train: checkpoint to resume not found: " + a.resume);
        const Checkpoint ck = load_checkpoint(a.resume);
        require(ck.model == mc && ck.model_seed == a.model.model_seed,
                "train: resumed checkpoint was built with a different model configuration");
        require(ck.step <= a.steps, "train: checkpoint is already past --steps");
        restore(ck, model, &trainer.optimizer());
        start = ck.step;
        losses = ck.losses;
    }

    const Json config = echo(a);
    const std::string log_path = a.log.empty() ? a.out + ".log" : a.log;
    std::ostringstream log;
    log << "# msfseg train\n# config " << config.dump() << "\nstep\tn\td\tlr\tloss\n";
    for (std::int64_t s = 0; s < start; ++s) {
        // earlier rows are rebuilt from the stored losses; n and lr depend only on (config, step)
        StepRecord r{s, batch_n(cfg, s), cfg.d, learning_rate(cfg, s), losses.at(static_cast<std::size_t>(s))};
        log << log_row(r);
    }
    auto save = [&](std::int64_t done) {
        Checkpoint ck = capture(model, &trainer.optimizer());
        ck.run_config = config;
        ck.step = done;
        ck.losses = losses;
        save_checkpoint(ck, a.out);
    };
    for (std::int64_t s = start; s < a.steps; ++s) {
        const StepRecord r = train_step(trainer, model, corpus, cfg, s);
        losses.push_back(r.loss);
        log << log_row(r);
        if (a.checkpoint_every > 0 && (s + 1) % a.checkpoint_every == 0) save(s + 1);
    }
    save(a.steps);
    write_text(log_path, log.str());
    const auto smooth = smooth_curve(losses, 0.9);
    out << "trained " << a.steps << " steps";
    if (!smooth.empty()) out << ", smoothed loss " << fmt("%.4f", smooth.front()) << " -> " << fmt("%.4f", smooth.back());
    out << "\ncheckpoint " << a.out << "\nlog " << log_path << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------- propagate

const ClassInfo* find_class(const Dataset& ds, int id) {
    for (const auto& c : ds.classes)
        if (c.id == id) return &c;
    return nullptr;
}

int pick_class(const Dataset& ds, int requested, const char* cmd) {
    if (requested != 0) {
        require(find_class(ds, requested) != nullptr,
                std::string(cmd) + ": class " + std::to_string(requested) + " not in the dataset");
        return requested;
    }
    require(!ds.test_classes.empty(), std::string(cmd) + ": --class is required (dataset has no test classes)");
    return ds.test_classes.front();
}

std::string selection_line(const std::string& vol, int z, const SupportPool& pool, const SliceOutcome& o) {
    std::ostringstream os;
    os << "volume=" << vol << " slice=" << z << " supports=";
    for (std::size_t g = 0; g < o.selection.groups.size(); ++g) {
        const auto& src = pool[o.selection.groups[g].front()].source;
        os << (g ? "," : "") << src.volume << ':' << src.slice << '+' << o.selection.groups[g].size();
    }
    os << " similarity=";
    for (std::size_t g = 0; g < o.selection.similarity.size(); ++g)
        os << (g ? "," : "") << fmt("%.6f", o.selection.similarity[g]);
    os << " qc=" << (o.qc.pass ? "pass" : "fail");
    if (!o.qc.reason.empty()) os << '(' << o.qc.reason << ')';
    if (o.selection.truncated()) os << " note=pool-smaller-than-n";
    os << '\n';
    return os.str();
}

Volume prediction_volume(const Volume& src, const ClassInfo& cls, const std::vector<Mask2D>& masks) {
    Volume v;
    v.id = src.id;
    v.depth = src.depth;
    v.height = src.height;
    v.width = src.width;
    v.spacing = src.spacing;
    v.classes = {cls};
    v.intensities = src.intensities;
    v.has_masks = true;
    v.labels.assign(v.voxels(), 0);
    for (int z = 0; z < v.depth; ++z) v.set_mask(z, cls.id, masks.at(static_cast<std::size_t>(z)));
    return v;
}

int cmd_propagate(PropagateArgs& a, std::ostream& out) {
    require(!a.checkpoint.empty(), "propagate: --checkpoint is required");
    require(fs::exists(a.checkpoint), "propagate: checkpoint not found: " + a.checkpoint);
    require(!a.out.empty(), "propagate: --out is required");
    require(a.mode == "intra" || a.mode == "inter", "propagate: --mode must be intra or inter");
    require(a.qc == "on" || a.qc == "off", "propagate: --qc must be on or off");
    require(a.n >= 1 && a.d >= 1 && a.labeled >= 1, "propagate: --n, --d and --labeled must be >= 1");
    const Dataset ds = load_dataset(a.data);
    const int cls = pick_class(ds, a.class_id, "propagate");
    const ClassInfo info = *find_class(ds, cls);
    const auto model = instantiate(load_checkpoint(a.checkpoint));
    const ModelSegmenter seg(*model);

    PropagationConfig pc;
    pc.n = a.n;
    pc.d = a.d;
    pc.qc.enabled = a.qc == "on";
    pc.qc.tau = a.tau;
    pc.qc.ratio_lo = a.ratio_lo;
    pc.qc.ratio_hi = a.ratio_hi;
    pc.qc.validate();

    auto lookup = [&](const std::string& id) {
        const Volume* v = ds.find(id);
        require(v != nullptr, "propagate: volume " + id + " not in the dataset");
        return v;
    };
    std::vector<const Volume*> refs, targets;
    if (a.mode == "inter") {
        if (a.reference.empty()) refs.push_back(&ds.volumes.front());
        for (const auto& id : a.reference) refs.push_back(lookup(id));
    }
    if (a.volumes.empty()) {
        for (const auto& v : ds.volumes)
            if (std::find(refs.begin(), refs.end(), &v) == refs.end()) targets.push_back(&v);
    } else {
        for (const auto& id : a.volumes) targets.push_back(lookup(id));
    }
    for (const Volume* t : targets)
        require(std::find(refs.begin(), refs.end(), t) == refs.end(),
                "propagate: volume " + t->id + " is both a reference and a target");
    require(!targets.empty(), "propagate: nothing to segment");

    const fs::path dir(a.out);
    fs::create_directories(dir / "masks");
    std::ostringstream sel;
    std::vector<VolumePrediction> scored;
    std::ostringstream summary;

    auto record = [&](const Volume& v, const VolumeResult& r, const SupportPool& pool,
                      const std::set<int>& labeled_slices) {
        for (int z = 0; z < v.depth; ++z) sel << selection_line(v.id, z, pool, r.slices[static_cast<std::size_t>(z)]);
        const auto masks = r.masks();
        save_volume(prediction_volume(v, info, masks), (dir / "masks" / (v.id + kVolumeExt)).string());
        if (v.has_masks) {
            VolumePrediction vp{v.id, cls, {}, {}};
            for (int z = 0; z < v.depth; ++z)
                if (!labeled_slices.contains(z)) {
                    vp.pred.push_back(masks[static_cast<std::size_t>(z)]);
                    vp.gt.push_back(v.mask(z, cls));
                }
            scored.push_back(std::move(vp));
        }
        summary << "volume " << v.id << ": added " << r.added << ", rejected " << r.rejected << ", pool "
                << r.pool_before << " -> " << pool.size() << '\n';
    };

    if (a.mode == "intra") {
        fs::create_directories(dir / "pools");
        for (const Volume* t : targets) {
            const auto labeled = central_sequences(*t, cls, a.labeled, a.d);
            std::set<int> used;
            for (const auto& ls : labeled)
                for (int k = 0; k < ls.data.depth(); ++k) used.insert(ls.first + k);
            SupportPool pool = init_pool(seg, labeled);
            const auto res = propagate_dataset({*t}, pool, seg, pc);
            record(*t, res.front(), pool, used);
            save_pool(pool, (dir / "pools" / (t->id + ".msfpool")).string());
        }
    } else {
        std::vector<LabeledSequence> labeled;
        for (const Volume* r : refs) {
            auto seqs = central_sequences(*r, cls, a.labeled, a.d);
            labeled.insert(labeled.end(), seqs.begin(), seqs.end());
        }
        SupportPool pool = init_pool(seg, labeled);
        std::vector<Volume> order;
        for (const Volume* t : targets) order.push_back(*t);
        propagate_dataset(order, pool, seg, pc,
                          [&](const Volume& v, const VolumeResult& r, const SupportPool& p) { record(v, r, p, {}); });
        save_pool(pool, (dir / "pool.msfpool").string());
    }

    write_text(dir / "selection.log", sel.str());
    write_text(dir / "config.json", echo(a).dump(2) + "\n");
    out << summary.str();
    if (!scored.empty()) {
        const MetricReport report = evaluate_run(scored, "propagate-" + a.mode, a.seed);
        write_text(dir / "report.tsv", report.to_tsv());
        write_text(dir / "report.json", report.to_json() + "\n");
        out << "mean dice " << fmt("%.4f", report.mean().dice) << " over " << scored.size() << " volume(s)\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------- evaluate

int cmd_evaluate(EvaluateArgs& a, std::ostream& out) {
    require(!a.pred.empty(), "evaluate: at least one --pred directory is required");
    const Dataset gt = load_dataset(a.gt);
    std::vector<MetricReport> runs;
    for (const auto& run : a.pred) {
        require(fs::is_directory(run), "evaluate: prediction directory not found: " + run);
        const fs::path masks = fs::path(run) / "masks";
        const auto files = volume_files(fs::is_directory(masks) ? masks.string() : run);
        if (files.empty()) throw InputError("evaluate: no predicted volumes in " + run);
        std::uint64_t seed = a.seed;
        if (std::ifstream cfg(fs::path(run) / "config.json"); cfg) {
            try {
                seed = Json::parse(cfg).value("seed", a.seed);
            } catch (const nlohmann::json::exception&) {
            }
        }
        std::vector<VolumePrediction> vols;
        std::vector<std::string> offenders;
        for (const auto& f : files) {
            const Volume p = load_volume(f);
            const Volume* g = gt.find(p.id);
            if (!g) {
                offenders.push_back(p.id + " (no ground truth)");
                continue;
            }
            if (g->depth != p.depth || g->height != p.height || g->width != p.width) {
                offenders.push_back(p.id + " (shape " + std::to_string(p.depth) + "x" + std::to_string(p.height) + "x" +
                                    std::to_string(p.width) + " vs " + std::to_string(g->depth) + "x" +
                                    std::to_string(g->height) + "x" + std::to_string(g->width) + ")");
                continue;
            }
            if (!p.has_masks || !g->has_masks) {
                offenders.push_back(p.id + " (no masks)");
                continue;
            }
            std::vector<int> classes = a.classes;
            if (classes.empty())
                for (const auto& c : p.classes) classes.push_back(c.id);
            for (int c : classes) {
                if (!g->find_class(c)) {
                    offenders.push_back(p.id + " (class " + std::to_string(c) + " not in ground truth)");
                    continue;
                }
                vols.push_back({p.id, c, p.masks(c), g->masks(c)});
            }
        }
        if (!offenders.empty()) {
            std::string msg = "evaluate: misaligned predictions in " + run + ":";
            for (const auto& o : offenders) msg += " " + o;
            throw InputError(msg);
        }
        runs.push_back(evaluate_run(vols, a.protocol, seed, a.tolerance));
    }
    const MetricReport report = runs.size() == 1 ? runs.front() : average_reports(runs);
    out << report.to_tsv();
    if (!a.out.empty()) {
        write_text(a.out, report.to_json() + "\n");
        write_text(a.out + ".config.json", echo(a).dump(2) + "\n");
    }
    return kExitOk;
}

// ---------------------------------------------------------------- serve

int cmd_serve(ServeArgs& a, std::ostream& out) {
    require(!a.checkpoint.empty() && fs::exists(a.checkpoint), "serve: checkpoint not found: " + a.checkpoint);
    Dataset ds = load_dataset(a.data);
    const int cls = pick_class(ds, a.class_id, "serve");
    std::optional<SupportPool> pool;
    if (!a.pool.empty()) {
        require(fs::exists(a.pool), "serve: pool file not found: " + a.pool);
        pool = load_pool(a.pool);
    }
    Service svc(std::move(ds), instantiate(load_checkpoint(a.checkpoint)), cls, std::move(pool));
    const int port = svc.bind(a.host, a.port);
    out << "listening on " << a.host << ':' << port << std::endl;
    svc.run();
    return kExitOk;
}

// ---------------------------------------------------------------- dispatch

std::string config_path(const std::vector<std::string>& args) {
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
    }
    return {};
}

template <class A>
CLI::App* add_command(CLI::App& app, const char* name, const char* help, A& args, std::string& config) {
    CLI::App* sub = app.add_subcommand(name, help);
    Binder b{sub};
    args.visit(b);
    sub->add_option("--config", config, "JSON file with option defaults");
    return sub;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    GenerateArgs gen;
    TrainArgs train;
    PropagateArgs prop;
    EvaluateArgs eval;
    ServeArgs serve;
    std::string config;

    CLI::App app{"Few-shot volumetric segmentation with multi-surrogate fusion", "msfseg"};
    app.require_subcommand(1, 1);
    auto* g = add_command(app, "generate", "write a synthetic dataset", gen, config);
    auto* t = add_command(app, "train", "episodic training", train, config);
    auto* p = add_command(app, "propagate", "support-pool propagation over volumes", prop, config);
    auto* e = add_command(app, "evaluate", "score predictions against ground truth", eval, config);
    auto* s = add_command(app, "serve", "HTTP service for interactive annotation", serve, config);

    try {
        if (const std::string path = config_path(args); !path.empty() && !args.empty()) {
            const std::string& cmd = args.front();
            if (cmd == "generate") load_config(gen, path);
            else if (cmd == "train") load_config(train, path);
            else if (cmd == "propagate") load_config(prop, path);
            else if (cmd == "evaluate") load_config(eval, path);
            else if (cmd == "serve") load_config(serve, path);
        }
        std::vector<std::string> argv_store{"msfseg"};
        argv_store.insert(argv_store.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const auto& a : argv_store) argv.push_back(a.c_str());
        try {
            app.parse(static_cast<int>(argv.size()), argv.data());
        } catch (const CLI::ParseError& pe) {
            const int code = app.exit(pe, out, err);
            return code == 0 ? kExitOk : kExitUsage;
        }
        if (g->parsed()) return cmd_generate(gen, out);
        if (t->parsed()) return cmd_train(train, out);
        if (p->parsed()) return cmd_propagate(prop, out);
        if (e->parsed()) return cmd_evaluate(eval, out);
        if (s->parsed()) return cmd_serve(serve, out);
        return kExitUsage;
    } catch (const ConfigError& ex) {
        err << "error: " << ex.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << '\n';
        return kExitFailure;
    }
}

}  // namespace msf
