#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msfseg/volume.hpp"

namespace msf {

inline constexpr int kBlobA = 1;
inline constexpr int kBlobB = 2;
inline constexpr int kTube = 3;

struct Range {
    double lo = 0.0, hi = 0.0;
    bool operator==(const Range&) const = default;
};

struct SynthConfig {
    int volumes = 6;
    int depth = 24;
    int size = 64;  // in-plane H = W
    int tubes = 1;
    Range tube_radius{3.0, 5.0};
    /// Lateral centreline amplitude as a fraction of the in-plane size.
    Range tube_curvature{0.05, 0.2};
    int blobs = 2;
    Range blob_axes{5.0, 12.0};
    /// Unlabeled ellipsoids (background in the label map), each with its own intensity.
    int distractors = 0;
    Range distractor_intensity{0.3, 0.95};
    /// Half-width of the per-volume uniform jitter of each class's mean intensity.
    double contrast_jitter = 0.08;
    double noise = 0.03;
    double bias = 0.1;  // amplitude of the smooth multiplicative bias field
    std::uint64_t seed = 0;

    /// Throws ConfigError on non-positive sizes or radii below one voxel.
    void validate() const;
    bool operator==(const SynthConfig&) const = default;
};

/// Blob classes are the training classes; tubes are held out.
std::vector<ClassInfo> synth_classes();
std::vector<int> synth_train_classes();
std::vector<int> synth_test_classes();

struct TubeInfo {
    double radius = 0.0;
    double length_inside = 0.0;  // centreline arc length within the z-extent of the grid
};

/// Deterministic in (cfg, seed). `tubes`, when given, receives the generated tube geometry.
Volume generate_volume(const SynthConfig& cfg, std::uint64_t seed, const std::string& id,
                       std::vector<TubeInfo>* tubes = nullptr);

/// cfg.volumes volumes named "<prefix>_NNN", each seeded from cfg.seed and its index.
std::vector<Volume> generate_corpus(const SynthConfig& cfg, const std::string& prefix = "synth");

}  // namespace msf
