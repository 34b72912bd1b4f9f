#include "msfseg/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "msfseg/errors.hpp"

namespace msf {

namespace {

// Maps a destination pixel back to source coordinates.
struct InverseMap {
    double cx, cy, tx, ty, cos_a, sin_a, inv_scale;
    bool flip;

    InverseMap(const AugmentTransform& t, int h, int w)
        : cx((w - 1) / 2.0),
          cy((h - 1) / 2.0),
          tx(t.shift_x * w),
          ty(t.shift_y * h),
          cos_a(std::cos(t.angle_deg * std::numbers::pi / 180.0)),
          sin_a(std::sin(t.angle_deg * std::numbers::pi / 180.0)),
          inv_scale(1.0 / t.scale),
          flip(t.flip) {}

    void operator()(int x, int y, double& sx, double& sy) const {
        const double dx = x - cx - tx;
        const double dy = y - cy - ty;
        // undo rotation, then scale, then flip
        double rx = (cos_a * dx + sin_a * dy) * inv_scale;
        const double ry = (-sin_a * dx + cos_a * dy) * inv_scale;
        if (flip) rx = -rx;
        sx = rx + cx;
        sy = ry + cy;
    }
};

}  // namespace

Image2D apply_transform(const Image2D& img, const AugmentTransform& t) {
    if (t.scale <= 0) throw InputError("augment: scale must be positive");
    const InverseMap map(t, img.h, img.w);
    Image2D out(img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double sx, sy;
            map(x, y, sx, sy);
            sx = std::clamp(sx, 0.0, img.w - 1.0);
            sy = std::clamp(sy, 0.0, img.h - 1.0);
            const int x0 = static_cast<int>(std::floor(sx));
            const int y0 = static_cast<int>(std::floor(sy));
            const int x1 = std::min(x0 + 1, img.w - 1);
            const int y1 = std::min(y0 + 1, img.h - 1);
            const double fx = sx - x0, fy = sy - y0;
            double v = img.at(y0, x0);
            if (fx != 0.0 || fy != 0.0) {
                const double top = img.at(y0, x0) * (1 - fx) + img.at(y0, x1) * fx;
                const double bot = img.at(y1, x0) * (1 - fx) + img.at(y1, x1) * fx;
                v = top * (1 - fy) + bot * fy;
            }
            if (t.gain != 1.0) v = std::clamp(v * t.gain, 0.0, 1.0);
            out.at(y, x) = v;
        }
    return out;
}

Mask2D apply_transform(const Mask2D& mask, const AugmentTransform& t) {
    if (t.scale <= 0) throw InputError("augment: scale must be positive");
    const InverseMap map(t, mask.h, mask.w);
    Mask2D out(mask.h, mask.w);
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x) {
            double sx, sy;
            map(x, y, sx, sy);
            const long ix = std::lround(sx);
            const long iy = std::lround(sy);
            if (ix < 0 || iy < 0 || ix >= mask.w || iy >= mask.h) continue;
            out.at(y, x) = mask.at(static_cast<int>(iy), static_cast<int>(ix));
        }
    return out;
}

AugmentTransform random_transform(std::mt19937_64& rng, const AugmentRanges& ranges) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto sym = [&](double r) { return (2.0 * u(rng) - 1.0) * r; };
    AugmentTransform t;
    t.flip = u(rng) < ranges.flip_p;
    t.angle_deg = sym(ranges.max_angle_deg);
    t.scale = ranges.min_scale + (ranges.max_scale - ranges.min_scale) * u(rng);
    t.shift_x = sym(ranges.max_shift);
    t.shift_y = sym(ranges.max_shift);
    t.gain = 1.0 + sym(ranges.max_jitter);
    return t;
}

std::vector<SupportSequence> pseudo_nshot(const SupportSequence& support, int n, std::uint64_t seed,
                                          const AugmentRanges& ranges, std::vector<AugmentTransform>* transforms) {
    if (n < 1) throw InputError("pseudo_nshot: n must be >= 1");
    validate(support);
    std::mt19937_64 rng(seed);
    std::vector<SupportSequence> out{support};
    if (transforms) transforms->assign(1, AugmentTransform{});
    for (int i = 1; i < n; ++i) {
        const AugmentTransform t = random_transform(rng, ranges);
        SupportSequence aug;
        for (int s = 0; s < support.depth(); ++s) {
            aug.slices.push_back(apply_transform(support.slices[s], t));
            aug.masks.push_back(apply_transform(support.masks[s], t));
        }
        out.push_back(std::move(aug));
        if (transforms) transforms->push_back(t);
    }
    return out;
}

}  // namespace msf
