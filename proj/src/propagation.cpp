#include "msfseg/propagation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "binio.hpp"
#include "msfseg/errors.hpp"

namespace msf {

namespace {

constexpr std::string_view kPoolMagic{"MSFPOOL\0", 8};
constexpr std::uint32_t kPoolVersion = 1;

double fg_fraction(const Mask2D& m) { return m.size() ? static_cast<double>(m.area()) / static_cast<double>(m.size()) : 0.0; }

Image2D to_size(const Image2D& img, int size) {
    return img.h == size && img.w == size ? img : resize_linear(img, size, size);
}

Mask2D to_size(const Mask2D& m, int h, int w) { return m.h == h && m.w == w ? m : resize_nearest(m, h, w); }

std::string source_name(const SourceRef& s) { return s.volume + ":" + std::to_string(s.slice); }

}  // namespace

const char* provenance_name(Provenance p) { return p == Provenance::ground_truth ? "ground_truth" : "predicted"; }

std::uint64_t SupportPool::add(std::vector<PoolEntry> entries) {
    std::set<SourceRef> fresh;
    for (const auto& e : entries) {
        if (by_source_.contains(e.source) || !fresh.insert(e.source).second)
            throw InputError("pool: duplicate source " + source_name(e.source));
        validate(e.slice);
        validate(e.mask);
        if (e.mask.h != e.slice.h || e.mask.w != e.slice.w)
            throw InputError("pool: mask shape differs from slice for " + source_name(e.source));
    }
    const std::uint64_t first = next_ordinal_;
    for (auto& e : entries) {
        e.ordinal = next_ordinal_++;
        by_source_.emplace(e.source, entries_.size());
        entries_.push_back(std::move(e));
    }
    if (!entries.empty()) ++version_;
    return first;
}

long SupportPool::find(const SourceRef& s) const {
    auto it = by_source_.find(s);
    return it == by_source_.end() ? -1 : static_cast<long>(it->second);
}

std::size_t SupportPool::count(Provenance p) const {
    return static_cast<std::size_t>(
        std::count_if(entries_.begin(), entries_.end(), [p](const PoolEntry& e) { return e.provenance == p; }));
}

void SupportPool::check_fingerprint(std::uint64_t fp) const {
    if (fp != fingerprint_)
        throw ConfigError("pool descriptors were computed with different backbone weights (pool " +
                          std::to_string(fingerprint_) + ", model " + std::to_string(fp) + ")");
}

bool SupportPool::operator==(const SupportPool& o) const {
    if (fingerprint_ != o.fingerprint_ || version_ != o.version_ || next_ordinal_ != o.next_ordinal_ ||
        next_sequence_ != o.next_sequence_ || entries_.size() != o.entries_.size())
        return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const auto &a = entries_[i], &b = o.entries_[i];
        if (a.slice != b.slice || a.mask != b.mask || a.descriptor.vector != b.descriptor.vector ||
            a.descriptor.zero_norm != b.descriptor.zero_norm || a.provenance != b.provenance || a.source != b.source ||
            a.ordinal != b.ordinal || a.sequence != b.sequence)
            return false;
    }
    return true;
}

std::vector<char> encode_pool(const SupportPool& pool) {
    bin::Writer w;
    w.magic(kPoolMagic);
    w.put(kPoolVersion);
    w.put(pool.fingerprint());
    w.put(pool.version());
    w.put(static_cast<std::uint64_t>(pool.size()));
    for (const auto& e : pool.entries()) {
        w.str(e.source.volume);
        w.put<std::int32_t>(e.source.slice);
        w.put(e.ordinal);
        w.put<std::int32_t>(e.sequence);
        w.put(static_cast<std::uint8_t>(e.provenance));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(e.slice.h));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(e.slice.w));
        w.doubles(e.slice.pixels);
        w.u8s(e.mask.bits);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(e.descriptor.vector.size()));
        w.doubles(e.descriptor.vector);
        w.put<std::uint8_t>(e.descriptor.zero_norm ? 1 : 0);
    }
    return w.buffer();
}

SupportPool decode_pool(std::vector<char> bytes) {
    bin::Reader r(std::move(bytes), "pool");
    r.magic(kPoolMagic);
    if (const auto v = r.get<std::uint32_t>("version"); v != kPoolVersion)
        r.fail("unsupported version " + std::to_string(v));
    SupportPool pool(r.get<std::uint64_t>("fingerprint"));
    const auto version = r.get<std::uint64_t>("pool version");
    const auto count = r.get<std::uint64_t>("entry count");
    std::uint64_t last = 0;
    for (std::uint64_t i = 0; i < count; ++i) {
        PoolEntry e;
        e.source.volume = r.str("source volume", 4096);
        e.source.slice = r.get<std::int32_t>("source slice");
        e.ordinal = r.get<std::uint64_t>("ordinal");
        if (i > 0 && e.ordinal <= last) r.fail("ordinals not increasing");
        last = e.ordinal;
        e.sequence = r.get<std::int32_t>("sequence");
        const auto prov = r.get<std::uint8_t>("provenance");
        if (prov > 1) r.fail("bad provenance " + std::to_string(prov));
        e.provenance = static_cast<Provenance>(prov);
        const auto h = r.get<std::uint32_t>("height"), w = r.get<std::uint32_t>("width");
        if (h == 0 || w == 0 || static_cast<std::uint64_t>(h) * w > (1u << 26)) r.fail("implausible raster size");
        e.slice = Image2D(static_cast<int>(h), static_cast<int>(w));
        e.slice.pixels = r.doubles(e.slice.size(), "slice");
        e.mask = Mask2D(static_cast<int>(h), static_cast<int>(w));
        e.mask.bits = r.u8s(e.mask.size(), "mask");
        for (auto b : e.mask.bits)
            if (b > 1) r.fail("non-binary mask");
        const auto dn = r.get<std::uint32_t>("descriptor length");
        if (dn > 1u << 20) r.fail("implausible descriptor length");
        e.descriptor.vector = r.doubles(dn, "descriptor");
        e.descriptor.zero_norm = r.get<std::uint8_t>("descriptor flag") != 0;
        if (pool.by_source_.contains(e.source)) r.fail("duplicate source " + source_name(e.source));
        pool.next_sequence_ = std::max(pool.next_sequence_, e.sequence + 1);
        pool.next_ordinal_ = e.ordinal + 1;
        pool.by_source_.emplace(e.source, pool.entries_.size());
        pool.entries_.push_back(std::move(e));
    }
    r.expect_end();
    pool.version_ = version;
    return pool;
}

void save_pool(const SupportPool& pool, const std::string& path) { bin::write_file(path, encode_pool(pool)); }

SupportPool load_pool(const std::string& path) { return decode_pool(bin::read_file(path)); }

PooledDescriptor ModelSegmenter::describe(const Image2D& slice) const {
    ag::NoGradGuard ng;
    return model_.describe(to_size(slice, model_.config().backbone.input_size));
}

SliceResult ModelSegmenter::segment(const Image2D& query, const std::vector<SupportSequence>& supports,
                                    const PoolEntry&) const {
    const int size = model_.config().backbone.input_size;
    std::vector<SupportSequence> resized(supports.size());
    for (std::size_t i = 0; i < supports.size(); ++i)
        for (int k = 0; k < supports[i].depth(); ++k) {
            resized[i].slices.push_back(to_size(supports[i].slices[k], size));
            resized[i].masks.push_back(to_size(supports[i].masks[k], size, size));
        }
    ag::NoGradGuard ng;
    const QueryPrediction p = model_.forward(to_size(query, size), resized);
    return {to_size(p.mask, query.h, query.w), p.fg_confidence};
}

void QCPolicy::validate() const {
    if (!(ratio_lo > 0 && ratio_lo < ratio_hi)) throw ConfigError("qc: need 0 < ratio_lo < ratio_hi");
    if (!std::isfinite(tau)) throw ConfigError("qc: threshold must be finite");
}

QCVerdict quality_check(const QCPolicy& qc, const SliceResult& r, const PoolEntry& top) {
    QCVerdict v;
    const double ref = fg_fraction(top.mask);
    v.area_ratio = ref > 0 ? fg_fraction(r.mask) / ref : 0.0;
    if (!qc.enabled) {
        v.pass = true;
        return v;
    }
    if (r.mask.area() == 0)
        v.reason = "empty prediction";
    else if (r.fg_confidence < qc.tau)
        v.reason = "confidence below threshold";
    else if (ref == 0 || v.area_ratio < qc.ratio_lo || v.area_ratio > qc.ratio_hi)
        v.reason = "area ratio outside band";
    else
        v.pass = true;
    return v;
}

SupportPool init_pool(const Segmenter& seg, const std::vector<LabeledSequence>& labeled) {
    if (labeled.empty()) throw InputError("init_pool: at least one labeled sequence is required");
    SupportPool pool(seg.fingerprint());
    std::vector<PoolEntry> entries;
    for (const auto& ls : labeled) {
        validate(ls.data);
        const int seq = pool.new_sequence();
        for (int k = 0; k < ls.data.depth(); ++k) {
            PoolEntry e;
            e.slice = ls.data.slices[k];
            e.mask = ls.data.masks[k];
            e.descriptor = seg.describe(e.slice);
            e.provenance = Provenance::ground_truth;
            e.source = {ls.volume, ls.first + k};
            e.sequence = seq;
            entries.push_back(std::move(e));
        }
    }
    pool.add(std::move(entries));
    return pool;
}

LabeledSequence labeled_sequence(const Volume& v, int class_id, int first, int d) {
    if (d < 1 || first < 0 || first + d > v.depth)
        throw InputError("labeled_sequence: slices [" + std::to_string(first) + ", " + std::to_string(first + d) +
                         ") outside volume " + v.id);
    LabeledSequence ls{v.id, first, {}};
    for (int z = first; z < first + d; ++z) {
        ls.data.slices.push_back(v.slice(z));
        ls.data.masks.push_back(v.mask(z, class_id));
    }
    return ls;
}

std::vector<LabeledSequence> central_sequences(const Volume& v, int class_id, int count, int d) {
    if (count < 1 || d < 1) throw InputError("central_sequences: count and d must be >= 1");
    int lo = -1, hi = -1;
    for (int z = 0; z < v.depth; ++z)
        if (v.contains(z, class_id)) {
            if (lo < 0) lo = z;
            hi = z;
        }
    if (lo < 0) throw InputError("central_sequences: class " + std::to_string(class_id) + " absent from " + v.id);
    if (count * d > v.depth) throw InputError("central_sequences: volume " + v.id + " too short");
    std::vector<LabeledSequence> out;
    int prev_end = 0;
    for (int i = 0; i < count; ++i) {
        // centre of the i-th of `count` equal parts of the class extent
        const double c = lo + (hi - lo + 1) * (i + 0.5) / count - 0.5;
        int first = static_cast<int>(std::lround(c - (d - 1) / 2.0));
        first = std::clamp(first, prev_end, v.depth - d * (count - i));
        out.push_back(labeled_sequence(v, class_id, first, d));
        prev_end = first + d;
    }
    return out;
}

std::vector<std::size_t> rank_pool(const SupportPool& pool, const PooledDescriptor& query) {
    std::vector<double> sim(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) sim[i] = cosine_similarity(pool[i].descriptor, query);
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (sim[a] != sim[b]) return sim[a] > sim[b];
        return pool[a].ordinal < pool[b].ordinal;
    });
    return order;
}

std::vector<std::size_t> select_supports(const SupportPool& pool, const PooledDescriptor& query, int n) {
    if (pool.empty()) throw InputError("select_supports: empty pool");
    if (n < 1) throw InputError("select_supports: n must be >= 1");
    auto order = rank_pool(pool, query);
    order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(n)));
    return order;
}

Selection select_sequences(const SupportPool& pool, const PooledDescriptor& query, int n, int d) {
    if (d < 1) throw InputError("select_sequences: d must be >= 1");
    Selection sel;
    sel.requested = n;
    if (d == 1) {
        for (std::size_t i : select_supports(pool, query, n)) {
            sel.groups.push_back({i});
            sel.anchors.push_back(i);
            sel.similarity.push_back(cosine_similarity(pool[i].descriptor, query));
        }
        return sel;
    }
    if (pool.empty()) throw InputError("select_supports: empty pool");
    if (n < 1) throw InputError("select_supports: n must be >= 1");
    std::vector<bool> used(pool.size(), false);
    for (std::size_t a : rank_pool(pool, query)) {
        if (static_cast<int>(sel.groups.size()) == n) break;
        if (used[a]) continue;
        const SourceRef& src = pool[a].source;
        // windows containing the anchor, most centred first
        std::vector<int> starts;
        for (int s = src.slice - d + 1; s <= src.slice; ++s) starts.push_back(s);
        std::stable_sort(starts.begin(), starts.end(), [&](int x, int y) {
            return std::abs(2 * (src.slice - x) - (d - 1)) < std::abs(2 * (src.slice - y) - (d - 1));
        });
        for (int s : starts) {
            std::vector<std::size_t> win;
            for (int z = s; z < s + d; ++z) {
                const long k = pool.find({src.volume, z});
                if (k < 0 || used[static_cast<std::size_t>(k)]) break;
                win.push_back(static_cast<std::size_t>(k));
            }
            if (static_cast<int>(win.size()) != d) continue;
            for (auto k : win) used[k] = true;
            sel.groups.push_back(std::move(win));
            sel.anchors.push_back(a);
            sel.similarity.push_back(cosine_similarity(pool[a].descriptor, query));
            break;
        }
    }
    if (sel.groups.empty())
        throw InputError("select_supports: pool holds no run of " + std::to_string(d) + " consecutive slices");
    return sel;
}

std::vector<SupportSequence> gather(const SupportPool& pool, const Selection& sel) {
    std::vector<SupportSequence> out;
    for (const auto& g : sel.groups) {
        SupportSequence s;
        for (auto i : g) {
            s.slices.push_back(pool[i].slice);
            s.masks.push_back(pool[i].mask);
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<Mask2D> VolumeResult::masks() const {
    std::vector<Mask2D> out;
    for (const auto& s : slices) out.push_back(s.result.mask);
    return out;
}

SliceOutcome segment_slice(const Image2D& query, const SupportPool& pool, const Segmenter& seg,
                           const PropagationConfig& cfg) {
    pool.check_fingerprint(seg.fingerprint());
    SliceOutcome out;
    out.descriptor = seg.describe(query);
    out.selection = select_sequences(pool, out.descriptor, cfg.n, cfg.d);
    const PoolEntry& top = pool[out.selection.anchors[0]];
    out.result = seg.segment(query, gather(pool, out.selection), top);
    out.qc = quality_check(cfg.qc, out.result, top);
    return out;
}

VolumeResult segment_volume(const Volume& v, SupportPool& pool, const Segmenter& seg, const PropagationConfig& cfg) {
    cfg.qc.validate();
    pool.check_fingerprint(seg.fingerprint());
    VolumeResult res;
    res.volume = v.id;
    res.pool_before = pool.size();
    std::vector<PoolEntry> accepted;
    for (int z = 0; z < v.depth; ++z) {
        Image2D img = v.slice(z);
        SliceOutcome o = segment_slice(img, pool, seg, cfg);
        if (!o.qc.pass) {
            ++res.rejected;
        } else if (pool.contains({v.id, z})) {
            ++res.already_pooled;
        } else {
            PoolEntry e;
            e.descriptor = o.descriptor;
            e.slice = std::move(img);
            e.mask = o.result.mask;
            e.provenance = Provenance::predicted;
            e.source = {v.id, z};
            accepted.push_back(std::move(e));
        }
        res.slices.push_back(std::move(o));
    }
    res.added = accepted.size();
    if (!accepted.empty()) {
        const int seq = pool.new_sequence();
        for (auto& e : accepted) e.sequence = seq;
        pool.add(std::move(accepted));
    }
    return res;
}

std::vector<VolumeResult> propagate_dataset(const std::vector<Volume>& volumes, SupportPool& pool,
                                            const Segmenter& seg, const PropagationConfig& cfg,
                                            const VolumeHook& hook) {
    if (pool.empty()) throw InputError("propagate: support pool is empty");
    std::vector<VolumeResult> out;
    for (const auto& v : volumes) {
        out.push_back(segment_volume(v, pool, seg, cfg));
        if (hook) hook(v, out.back(), pool);
    }
    return out;
}

}  // namespace msf
