#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msfseg/model.hpp"
#include "msfseg/train.hpp"
#include "msfseg/volume.hpp"

namespace msf {

/// Setting 1: test classes may appear in training images. Setting 2: training
/// episodes never touch a slice containing a test class.
enum class Setting { one = 1, two = 2 };

struct SliceRef {
    int volume = 0;  // index into the corpus
    int slice = 0;
    bool operator==(const SliceRef&) const = default;
};

/// d consecutive slices [first, first + depth) of one volume.
struct SequenceRef {
    int volume = 0;
    int first = 0;
    int depth = 1;
    bool contains(const SliceRef& s) const { return s.volume == volume && s.slice >= first && s.slice < first + depth; }
    bool operator==(const SequenceRef&) const = default;
};

struct Episode {
    int class_id = 0;
    Setting setting = Setting::one;
    SliceRef query;
    std::vector<SequenceRef> supports;
    bool operator==(const Episode&) const = default;
};

struct EpisodeSpec {
    int class_id = 0;
    int n = 1;
    int d = 1;
    Setting setting = Setting::one;
    std::vector<int> test_classes;
    std::size_t min_area = 1;  // class pixels a slice needs to be eligible
};

/// True when slice z of v may be used for an episode of `spec` (class present, no
/// test-class leakage under setting 2 for training classes).
bool eligible(const Volume& v, int z, const EpisodeSpec& spec);

/// Query from a class-containing slice; supports from other volumes whenever they
/// have eligible data, falling back to non-overlapping windows of the query
/// volume. Throws InputError when fewer than n supports exist.
Episode sample_episode(const std::vector<Volume>& corpus, const EpisodeSpec& spec, std::uint64_t seed);

/// Rasters for an episode, resampled to the model input size.
TrainExample materialize(const std::vector<Volume>& corpus, const Episode& ep, int size);

/// Mini-batch of fresh episodes; class drawn uniformly from `classes`.
std::vector<TrainExample> sample_batch(const std::vector<Volume>& corpus, const std::vector<int>& classes,
                                       EpisodeSpec spec, int batch, std::uint64_t seed, int size,
                                       std::vector<Episode>* episodes = nullptr);

/// "episode class=3 setting=2 query=vol_000:12 supports=vol_001:4+1,vol_002:7+1"
std::string manifest_line(const std::vector<Volume>& corpus, const Episode& ep);
Episode parse_manifest_line(const std::vector<Volume>& corpus, const std::string& line);
void write_manifest(const std::string& path, const std::vector<Volume>& corpus, const std::vector<Episode>& eps);
std::vector<Episode> read_manifest(const std::string& path, const std::vector<Volume>& corpus);

}  // namespace msf
