#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msfseg/image.hpp"

namespace msf {

/// 2|A∩B| / (|A|+|B|); 1 when both are empty.
double dice(const Mask2D& pred, const Mask2D& gt);
/// |A∩B| / |A∪B|; 1 when both are empty.
double jaccard(const Mask2D& pred, const Mask2D& gt);

/// Foreground pixels with at least one background 4-neighbour (off-image counts as background).
Mask2D boundary(const Mask2D& mask);

/// Boundary F-measure: boundary pixels match when within Euclidean distance `tol`
/// of the other boundary. 1 when both boundaries are empty, 0 when one is.
double boundary_f(const Mask2D& pred, const Mask2D& gt, int tol);

/// ceil(0.008 · diagonal).
int default_boundary_tolerance(int h, int w);

/// Stacked-voxel variants over aligned slice lists.
double volume_dice(const std::vector<Mask2D>& pred, const std::vector<Mask2D>& gt);
double volume_jaccard(const std::vector<Mask2D>& pred, const std::vector<Mask2D>& gt);
/// Mean per-slice F over slices where pred or gt is non-empty; 1 if there are none.
double mean_slice_f(const std::vector<Mask2D>& pred, const std::vector<Mask2D>& gt, int tol);

struct VolumePrediction {
    std::string volume;
    int class_id = 0;
    std::vector<Mask2D> pred;
    std::vector<Mask2D> gt;
};

struct MetricRow {
    std::string volume;
    int class_id = 0;
    double dice = 0, j = 0, f = 0, jf = 0;
    bool operator==(const MetricRow&) const = default;
};

struct MetricReport {
    std::string protocol;
    std::vector<std::uint64_t> seeds;
    std::vector<MetricRow> rows;  // sorted by (class, volume)

    /// Per-class means (volume = "*"), followed by the overall mean (class 0).
    std::vector<MetricRow> aggregates() const;
    MetricRow mean() const;

    std::string to_tsv() const;
    std::string to_json() const;
    static MetricReport from_json(const std::string& text);
    bool operator==(const MetricReport&) const = default;
};

/// tol < 0 selects default_boundary_tolerance per slice size. Throws InputError on
/// misaligned inputs, naming the offending volumes.
MetricReport evaluate_run(const std::vector<VolumePrediction>& volumes, const std::string& protocol,
                          std::uint64_t seed, int tol = -1);

/// Row-wise mean of several runs over the same (volume, class) rows.
MetricReport average_reports(const std::vector<MetricReport>& runs);

}  // namespace msf
