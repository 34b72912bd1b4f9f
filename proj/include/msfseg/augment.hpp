#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "msfseg/image.hpp"
#include "msfseg/model.hpp"

namespace msf {

/// One geometric + intensity perturbation. Geometry is applied about the image
/// centre in the order flip → scale → rotate → translate; intensity gain never
/// touches masks.
struct AugmentTransform {
    bool flip = false;        // horizontal
    double angle_deg = 0.0;
    double scale = 1.0;
    double shift_x = 0.0;     // fraction of width
    double shift_y = 0.0;     // fraction of height
    double gain = 1.0;        // intensity multiplier, result clamped to [0,1]

    bool is_identity() const {
        return !flip && angle_deg == 0.0 && scale == 1.0 && shift_x == 0.0 && shift_y == 0.0 && gain == 1.0;
    }
};

struct AugmentRanges {
    double flip_p = 0.5;
    double max_angle_deg = 15.0;
    double min_scale = 0.9;
    double max_scale = 1.1;
    double max_shift = 0.05;
    double max_jitter = 0.10;
};

/// Bilinear inverse mapping with edge clamping.
Image2D apply_transform(const Image2D& img, const AugmentTransform& t);
/// Nearest-neighbour inverse mapping; outside pixels are background.
Mask2D apply_transform(const Mask2D& mask, const AugmentTransform& t);

/// Draws one transform uniformly within the ranges.
AugmentTransform random_transform(std::mt19937_64& rng, const AugmentRanges& ranges = {});

/// First entry is the untouched support; the remaining n−1 are augmented copies
/// whose masks follow the same geometric transform. `transforms`, when given,
/// receives the n transforms (identity first).
std::vector<SupportSequence> pseudo_nshot(const SupportSequence& support, int n, std::uint64_t seed,
                                          const AugmentRanges& ranges = {},
                                          std::vector<AugmentTransform>* transforms = nullptr);

}  // namespace msf
