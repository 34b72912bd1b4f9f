#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "msfseg/backbone.hpp"
#include "msfseg/image.hpp"
#include "msfseg/model.hpp"
#include "msfseg/volume.hpp"

namespace msf {

enum class Provenance : std::uint8_t { ground_truth = 0, predicted = 1 };

const char* provenance_name(Provenance p);

struct SourceRef {
    std::string volume;
    int slice = 0;
    auto operator<=>(const SourceRef&) const = default;
};

struct PoolEntry {
    Image2D slice;  // native resolution
    Mask2D mask;
    PooledDescriptor descriptor;
    Provenance provenance = Provenance::ground_truth;
    SourceRef source;
    std::uint64_t ordinal = 0;  // assigned by the pool, unique and increasing
    int sequence = -1;          // entries inserted together from one labeled sequence or volume
};

/// Append-only collection of support entries. Every successful mutation bumps
/// version(); entries are never removed or modified.
class SupportPool {
public:
    /// `fingerprint` identifies the backbone weights the descriptors were computed with.
    explicit SupportPool(std::uint64_t fingerprint = 0) : fingerprint_(fingerprint) {}

    /// Appends all entries or none. Throws InputError on a duplicate source, a
    /// mask/slice shape mismatch or a non-binary mask. Returns the first new ordinal.
    std::uint64_t add(std::vector<PoolEntry> entries);

    int new_sequence() { return next_sequence_++; }

    bool contains(const SourceRef& s) const { return by_source_.contains(s); }
    /// Index of the entry for `s`, or -1.
    long find(const SourceRef& s) const;

    const std::vector<PoolEntry>& entries() const { return entries_; }
    const PoolEntry& operator[](std::size_t i) const { return entries_.at(i); }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    std::size_t count(Provenance p) const;

    std::uint64_t version() const { return version_; }
    std::uint64_t fingerprint() const { return fingerprint_; }
    /// Throws ConfigError when the pool's descriptors came from different backbone weights.
    void check_fingerprint(std::uint64_t fp) const;

    bool operator==(const SupportPool&) const;

private:
    friend SupportPool decode_pool(std::vector<char> bytes);

    std::uint64_t fingerprint_;
    std::uint64_t version_ = 0;
    std::uint64_t next_ordinal_ = 0;
    int next_sequence_ = 0;
    std::vector<PoolEntry> entries_;
    std::map<SourceRef, std::size_t> by_source_;
};

std::vector<char> encode_pool(const SupportPool& pool);
SupportPool decode_pool(std::vector<char> bytes);
void save_pool(const SupportPool& pool, const std::string& path);
SupportPool load_pool(const std::string& path);

struct SliceResult {
    Mask2D mask;  // same shape as the query
    double fg_confidence = 0.0;
};

/// The model as the workflow sees it. Implementations handle resampling between
/// native slice resolution and their input size.
class Segmenter {
public:
    virtual ~Segmenter() = default;
    virtual PooledDescriptor describe(const Image2D& slice) const = 0;
    /// `supports` are ordered by similarity; `top` is the most similar pool entry.
    virtual SliceResult segment(const Image2D& query, const std::vector<SupportSequence>& supports,
                                const PoolEntry& top) const = 0;
    virtual std::uint64_t fingerprint() const = 0;
};

class ModelSegmenter final : public Segmenter {
public:
    explicit ModelSegmenter(const MsfSegModel& model) : model_(model) {}
    PooledDescriptor describe(const Image2D& slice) const override;
    SliceResult segment(const Image2D& query, const std::vector<SupportSequence>& supports,
                        const PoolEntry& top) const override;
    std::uint64_t fingerprint() const override { return model_.backbone_fingerprint(); }

private:
    const MsfSegModel& model_;
};

struct QCPolicy {
    double tau = 0.85;
    double ratio_lo = 0.25;
    double ratio_hi = 4.0;
    bool enabled = true;
    /// Throws ConfigError unless 0 < ratio_lo < ratio_hi.
    void validate() const;
};

struct QCVerdict {
    bool pass = false;
    double area_ratio = 0.0;  // predicted fg fraction over the top support's fg fraction
    std::string reason;       // empty when passed
};

/// Disabled policies pass everything. Otherwise the prediction must be non-empty,
/// confident and close in relative area to the top-1 support.
QCVerdict quality_check(const QCPolicy& qc, const SliceResult& r, const PoolEntry& top);

/// One labeled support: d consecutive slices of a volume starting at `first`.
struct LabeledSequence {
    std::string volume;
    int first = 0;
    SupportSequence data;
};

/// Builds the ground-truth pool. Throws InputError on empty input or duplicate sources.
SupportPool init_pool(const Segmenter& seg, const std::vector<LabeledSequence>& labeled);

/// Labeled sequence made of slices [first, first + d) of `v` for one class.
LabeledSequence labeled_sequence(const Volume& v, int class_id, int first, int d);

/// `count` windows of d slices spread evenly over the slices where the class is
/// present; count = 1 gives the window centred on the class extent.
std::vector<LabeledSequence> central_sequences(const Volume& v, int class_id, int count, int d);

/// Pool indices ranked by cosine similarity to `query`, descending, ties by smaller ordinal.
std::vector<std::size_t> rank_pool(const SupportPool& pool, const PooledDescriptor& query);

/// The min(n, |pool|) most similar entries. Throws InputError on an empty pool or n < 1.
std::vector<std::size_t> select_supports(const SupportPool& pool, const PooledDescriptor& query, int n);

struct Selection {
    /// Per support, pool indices of its slices in slice order.
    std::vector<std::vector<std::size_t>> groups;
    /// Per support, the ranked entry the window was built around, and its similarity.
    std::vector<std::size_t> anchors;
    std::vector<double> similarity;
    int requested = 0;
    bool truncated() const { return static_cast<int>(groups.size()) < requested; }
};

/// d = 1: the n most similar entries. d > 1: walks the ranking and greedily takes,
/// around each entry, a window of d consecutive pooled slices of the same volume
/// disjoint from the windows taken so far. Throws InputError if no window exists.
Selection select_sequences(const SupportPool& pool, const PooledDescriptor& query, int n, int d);

std::vector<SupportSequence> gather(const SupportPool& pool, const Selection& sel);

struct PropagationConfig {
    int n = 1;
    int d = 1;
    QCPolicy qc;
};

struct SliceOutcome {
    PooledDescriptor descriptor;  // of the query
    SliceResult result;
    Selection selection;
    QCVerdict qc;
};

struct VolumeResult {
    std::string volume;
    std::vector<SliceOutcome> slices;
    std::size_t pool_before = 0;
    std::size_t added = 0;
    std::size_t rejected = 0;
    std::size_t already_pooled = 0;  // passed QC but the source was already in the pool
    std::vector<Mask2D> masks() const;
};

/// One slice against the current pool; the pool is not modified.
SliceOutcome segment_slice(const Image2D& query, const SupportPool& pool, const Segmenter& seg,
                           const PropagationConfig& cfg);

/// Segments every slice against the pool as it was at the start of the volume, then
/// appends the QC-passing predictions in one update. Throws ConfigError when the
/// segmenter's fingerprint differs from the pool's.
VolumeResult segment_volume(const Volume& v, SupportPool& pool, const Segmenter& seg, const PropagationConfig& cfg);

using VolumeHook = std::function<void(const Volume&, const VolumeResult&, const SupportPool&)>;

/// Runs segment_volume over the volumes in order, calling `hook` after each pool update.
std::vector<VolumeResult> propagate_dataset(const std::vector<Volume>& volumes, SupportPool& pool,
                                            const Segmenter& seg, const PropagationConfig& cfg,
                                            const VolumeHook& hook = {});

}  // namespace msf
