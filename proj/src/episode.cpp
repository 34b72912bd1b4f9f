#include "msfseg/episode.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "msfseg/errors.hpp"

namespace msf {

namespace {

bool is_test_class(const EpisodeSpec& spec, int c) {
    return std::find(spec.test_classes.begin(), spec.test_classes.end(), c) != spec.test_classes.end();
}

// Candidate support windows per volume.
std::vector<std::vector<SequenceRef>> windows(const std::vector<Volume>& corpus, const EpisodeSpec& spec,
                                              const SliceRef& query) {
    std::vector<std::vector<SequenceRef>> out(corpus.size());
    for (std::size_t v = 0; v < corpus.size(); ++v) {
        const Volume& vol = corpus[v];
        std::vector<bool> ok(vol.depth);
        for (int z = 0; z < vol.depth; ++z) ok[z] = eligible(vol, z, spec);
        for (int s = 0; s + spec.d <= vol.depth; ++s) {
            bool all = true;
            for (int k = 0; k < spec.d && all; ++k) all = ok[s + k];
            SequenceRef w{static_cast<int>(v), s, spec.d};
            if (all && !w.contains(query)) out[v].push_back(w);
        }
    }
    return out;
}

int volume_index(const std::vector<Volume>& corpus, const std::string& id) {
    for (std::size_t i = 0; i < corpus.size(); ++i)
        if (corpus[i].id == id) return static_cast<int>(i);
    throw InputError("manifest: unknown volume " + id);
}

}  // namespace

bool eligible(const Volume& v, int z, const EpisodeSpec& spec) {
    if (v.class_area(z, spec.class_id) < std::max<std::size_t>(spec.min_area, 1)) return false;
    if (spec.setting == Setting::two && !is_test_class(spec, spec.class_id))
        for (int c : spec.test_classes)
            if (v.contains(z, c)) return false;
    return true;
}

Episode sample_episode(const std::vector<Volume>& corpus, const EpisodeSpec& spec, std::uint64_t seed) {
    if (spec.n < 1 || spec.d < 1) throw InputError("sample_episode: n and d must be >= 1");
    std::mt19937_64 rng(seed);
    std::vector<SliceRef> queries;
    for (std::size_t v = 0; v < corpus.size(); ++v)
        for (int z = 0; z < corpus[v].depth; ++z)
            if (eligible(corpus[v], z, spec)) queries.push_back({static_cast<int>(v), z});
    if (queries.empty())
        throw InputError("sample_episode: no slice contains class " + std::to_string(spec.class_id));

    Episode ep;
    ep.class_id = spec.class_id;
    ep.setting = spec.setting;
    ep.query = queries[std::uniform_int_distribution<std::size_t>(0, queries.size() - 1)(rng)];

    auto cand = windows(corpus, spec, ep.query);
    std::vector<int> others;
    for (std::size_t v = 0; v < corpus.size(); ++v)
        if (static_cast<int>(v) != ep.query.volume && !cand[v].empty()) others.push_back(static_cast<int>(v));

    auto overlaps = [&](const SequenceRef& w) {
        for (const auto& s : ep.supports)
            if (s.volume == w.volume && w.first < s.first + s.depth && s.first < w.first + w.depth) return true;
        return false;
    };
    auto take = [&](int v) {
        auto& pool = cand[v];
        while (!pool.empty()) {
            const std::size_t k = std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng);
            const SequenceRef w = pool[k];
            pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(k));
            if (!overlaps(w)) {
                ep.supports.push_back(w);
                return true;
            }
        }
        return false;
    };
    // other volumes first, volume chosen uniformly so every one gets covered
    while (static_cast<int>(ep.supports.size()) < spec.n && !others.empty()) {
        const std::size_t k = std::uniform_int_distribution<std::size_t>(0, others.size() - 1)(rng);
        if (!take(others[k])) others.erase(others.begin() + static_cast<std::ptrdiff_t>(k));
    }
    while (static_cast<int>(ep.supports.size()) < spec.n && take(ep.query.volume)) {
    }
    if (static_cast<int>(ep.supports.size()) < spec.n)
        throw InputError("sample_episode: only " + std::to_string(ep.supports.size()) + " support sequences of " +
                         std::to_string(spec.d) + " slices available for class " + std::to_string(spec.class_id) +
                         ", " + std::to_string(spec.n) + " requested");
    return ep;
}

TrainExample materialize(const std::vector<Volume>& corpus, const Episode& ep, int size) {
    const Volume& qv = corpus.at(ep.query.volume);
    TrainExample ex;
    ex.query = prepare_slice(qv, ep.query.slice, size);
    ex.gt = prepare_mask(qv, ep.query.slice, ep.class_id, size);
    for (const auto& s : ep.supports) {
        const Volume& v = corpus.at(s.volume);
        SupportSequence seq;
        for (int z = s.first; z < s.first + s.depth; ++z) {
            seq.slices.push_back(prepare_slice(v, z, size));
            seq.masks.push_back(prepare_mask(v, z, ep.class_id, size));
        }
        ex.supports.push_back(std::move(seq));
    }
    return ex;
}

std::vector<TrainExample> sample_batch(const std::vector<Volume>& corpus, const std::vector<int>& classes,
                                       EpisodeSpec spec, int batch, std::uint64_t seed, int size,
                                       std::vector<Episode>* episodes) {
    if (classes.empty()) throw InputError("sample_batch: no classes");
    std::mt19937_64 rng(seed);
    std::vector<TrainExample> out;
    if (episodes) episodes->clear();
    for (int b = 0; b < batch; ++b) {
        spec.class_id = classes[std::uniform_int_distribution<std::size_t>(0, classes.size() - 1)(rng)];
        const Episode ep = sample_episode(corpus, spec, rng());
        out.push_back(materialize(corpus, ep, size));
        if (episodes) episodes->push_back(ep);
    }
    return out;
}

std::string manifest_line(const std::vector<Volume>& corpus, const Episode& ep) {
    std::ostringstream os;
    os << "episode class=" << ep.class_id << " setting=" << static_cast<int>(ep.setting)
       << " query=" << corpus.at(ep.query.volume).id << ':' << ep.query.slice << " supports=";
    for (std::size_t i = 0; i < ep.supports.size(); ++i)
        os << (i ? "," : "") << corpus.at(ep.supports[i].volume).id << ':' << ep.supports[i].first << '+'
           << ep.supports[i].depth;
    return os.str();
}

Episode parse_manifest_line(const std::vector<Volume>& corpus, const std::string& line) {
    std::istringstream is(line);
    std::string tag;
    is >> tag;
    if (tag != "episode") throw InputError("manifest: expected 'episode', got '" + tag + "'");
    Episode ep;
    std::set<std::string> seen;
    for (std::string kv; is >> kv;) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw InputError("manifest: bad field '" + kv + "'");
        const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
        seen.insert(key);
        auto ref = [&](const std::string& s, char sep) {
            const auto c = s.rfind(':');
            if (c == std::string::npos) throw InputError("manifest: bad reference '" + s + "'");
            const auto p = s.find(sep, c);
            return std::tuple{volume_index(corpus, s.substr(0, c)), std::stoi(s.substr(c + 1, p - c - 1)),
                              p == std::string::npos ? 1 : std::stoi(s.substr(p + 1))};
        };
        try {
            if (key == "class") ep.class_id = std::stoi(val);
            else if (key == "setting") {
                const int s = std::stoi(val);
                if (s != 1 && s != 2) throw InputError("manifest: setting must be 1 or 2");
                ep.setting = static_cast<Setting>(s);
            } else if (key == "query") {
                auto [v, z, d] = ref(val, '\0');
                ep.query = {v, z};
            } else if (key == "supports") {
                std::istringstream ss(val);
                for (std::string item; std::getline(ss, item, ',');) {
                    auto [v, first, depth] = ref(item, '+');
                    ep.supports.push_back({v, first, depth});
                }
            } else
                throw InputError("manifest: unknown key '" + key + "'");
        } catch (const std::logic_error&) {
            throw InputError("manifest: bad value in '" + kv + "'");
        }
    }
    for (const char* k : {"class", "setting", "query", "supports"})
        if (!seen.contains(k)) throw InputError(std::string("manifest: missing ") + k);
    return ep;
}

void write_manifest(const std::string& path, const std::vector<Volume>& corpus, const std::vector<Episode>& eps) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path);
    for (const auto& e : eps) out << manifest_line(corpus, e) << '\n';
}

std::vector<Episode> read_manifest(const std::string& path, const std::vector<Volume>& corpus) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read " + path);
    std::vector<Episode> out;
    for (std::string line; std::getline(in, line);)
        if (!line.empty() && line[0] != '#') out.push_back(parse_manifest_line(corpus, line));
    return out;
}

}  // namespace msf
