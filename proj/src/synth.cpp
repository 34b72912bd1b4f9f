#include "msfseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "msfseg/errors.hpp"

namespace msf {

namespace {

constexpr double kBackground = 0.15;
constexpr double kBase[4] = {kBackground, 0.45, 0.85, 0.65};
constexpr double kStep = 0.25;  // centreline sampling step in voxels

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
    x ^= x >> 31;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 29;
    return x;
}

double uniform(std::mt19937_64& rng, Range r) { return std::uniform_real_distribution<double>(r.lo, r.hi)(rng); }

struct Point {
    double z, y, x;
};

double segment_dist2(const Point& p, const Point& a, const Point& b) {
    const double vz = b.z - a.z, vy = b.y - a.y, vx = b.x - a.x;
    const double wz = p.z - a.z, wy = p.y - a.y, wx = p.x - a.x;
    const double len2 = vz * vz + vy * vy + vx * vx;
    const double t = len2 > 0 ? std::clamp((wz * vz + wy * vy + wx * vx) / len2, 0.0, 1.0) : 0.0;
    const double dz = wz - t * vz, dy = wy - t * vy, dx = wx - t * vx;
    return dz * dz + dy * dy + dx * dx;
}

}  // namespace

void SynthConfig::validate() const {
    if (volumes < 1 || depth < 1 || size < 4) throw ConfigError("synth: volumes, depth and size must be positive");
    if (tubes < 0 || blobs < 0 || distractors < 0) throw ConfigError("synth: negative object counts");
    if (tube_radius.lo < 1.0 || tube_radius.hi < tube_radius.lo) throw ConfigError("synth: tube radius must be >= 1 voxel");
    if (blob_axes.lo < 1.0 || blob_axes.hi < blob_axes.lo) throw ConfigError("synth: bad blob axes");
    if (tube_curvature.lo < 0 || tube_curvature.hi < tube_curvature.lo) throw ConfigError("synth: bad curvature range");
    if (distractor_intensity.lo < 0 || distractor_intensity.hi < distractor_intensity.lo || distractor_intensity.hi > 1)
        throw ConfigError("synth: distractor intensity must lie in [0, 1]");
    if (noise < 0 || bias < 0 || bias >= 1 || contrast_jitter < 0) throw ConfigError("synth: bad noise/bias/jitter");
}

std::vector<ClassInfo> synth_classes() {
    return {{kBlobA, "blob_a", false}, {kBlobB, "blob_b", false}, {kTube, "tube", true}};
}

std::vector<int> synth_train_classes() { return {kBlobA, kBlobB}; }
std::vector<int> synth_test_classes() { return {kTube}; }

Volume generate_volume(const SynthConfig& cfg, std::uint64_t seed, const std::string& id, std::vector<TubeInfo>* tubes) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Volume v;
    v.id = id;
    v.depth = cfg.depth;
    v.height = v.width = cfg.size;
    v.classes = synth_classes();
    v.has_masks = true;
    v.labels.assign(v.voxels(), 0);
    const double S = cfg.size;

    // random rotated ellipsoid; visit(i) gets the flat index of every voxel inside
    auto ellipsoid = [&](const auto& visit) {
        const double az = uniform(rng, cfg.blob_axes) * 0.6, ay = uniform(rng, cfg.blob_axes),
                     ax = uniform(rng, cfg.blob_axes);
        const double cz = (0.2 + 0.6 * u(rng)) * (cfg.depth - 1);
        const double cy = ay + (S - 2 * ay) * u(rng), cx = ax + (S - 2 * ax) * u(rng);
        const double th = std::numbers::pi * u(rng), c = std::cos(th), s = std::sin(th);
        for (int z = 0; z < cfg.depth; ++z)
            for (int y = 0; y < cfg.size; ++y)
                for (int x = 0; x < cfg.size; ++x) {
                    const double dy = y - cy, dx = x - cx;
                    const double ry = c * dy + s * dx, rx = -s * dy + c * dx, rz = z - cz;
                    if (ry * ry / (ay * ay) + rx * rx / (ax * ax) + rz * rz / (az * az) <= 1.0)
                        visit(z * v.plane() + static_cast<std::size_t>(y) * cfg.size + x);
                }
    };
    for (int b = 0; b < cfg.blobs; ++b) {
        const auto cls = static_cast<std::uint8_t>(b % 2 == 0 ? kBlobA : kBlobB);
        ellipsoid([&](std::size_t i) { v.labels[i] = cls; });
    }

    if (tubes) tubes->clear();
    for (int t = 0; t < cfg.tubes; ++t) {
        const double r = uniform(rng, cfg.tube_radius);
        const double amp = uniform(rng, cfg.tube_curvature) * S;
        const double margin = r + amp + 1.0;
        const double cy = margin + (S - 2 * margin) * u(rng), cx = margin + (S - 2 * margin) * u(rng);
        const double fy = 0.5 + u(rng), fx = 0.5 + u(rng);
        const double py = 2 * std::numbers::pi * u(rng), px = 2 * std::numbers::pi * u(rng);
        const double denom = std::max(cfg.depth, 1);
        auto centre = [&](double z) {
            return Point{z, cy + amp * std::sin(2 * std::numbers::pi * fy * z / denom + py),
                         cx + amp * std::sin(2 * std::numbers::pi * fx * z / denom + px)};
        };
        // the centreline runs past both ends of the grid so no end caps fall inside it
        std::vector<Point> line;
        for (double z = -r - 2.0; z <= cfg.depth - 1 + r + 2.0 + 1e-9; z += kStep) line.push_back(centre(z));
        TubeInfo info{r, 0.0};
        for (std::size_t i = 1; i < line.size(); ++i) {
            const double mz = 0.5 * (line[i].z + line[i - 1].z);
            if (mz < -0.5 || mz > cfg.depth - 0.5) continue;
            const double dz = line[i].z - line[i - 1].z, dy = line[i].y - line[i - 1].y, dx = line[i].x - line[i - 1].x;
            info.length_inside += std::sqrt(dz * dz + dy * dy + dx * dx);
        }
        if (tubes) tubes->push_back(info);
        for (int z = 0; z < cfg.depth; ++z) {
            std::vector<std::size_t> near;
            for (std::size_t i = 1; i < line.size(); ++i)
                if (std::abs(0.5 * (line[i].z + line[i - 1].z) - z) <= r + kStep) near.push_back(i);
            for (int y = 0; y < cfg.size; ++y)
                for (int x = 0; x < cfg.size; ++x) {
                    const Point p{static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
                    for (std::size_t i : near)
                        if (segment_dist2(p, line[i - 1], line[i]) <= r * r) {
                            v.labels[z * v.plane() + static_cast<std::size_t>(y) * cfg.size + x] = kTube;
                            break;
                        }
                }
        }
    }

    // per-volume class contrast jitter, smooth bias field, additive noise
    double level[4];
    for (int c = 0; c < 4; ++c) level[c] = kBase[c] + (c == 0 ? 0.0 : cfg.contrast_jitter * (2 * u(rng) - 1));
    const double bz = 2 * std::numbers::pi * u(rng), by = 2 * std::numbers::pi * u(rng), bx = 2 * std::numbers::pi * u(rng);
    // unlabeled distractors, drawn last so the labeled content does not depend on them
    std::vector<double> override_level;
    if (cfg.distractors > 0) override_level.assign(v.voxels(), -1.0);
    for (int d = 0; d < cfg.distractors; ++d) {
        const double lv = uniform(rng, cfg.distractor_intensity);
        ellipsoid([&](std::size_t i) {
            if (v.labels[i] == 0) override_level[i] = lv;
        });
    }
    std::normal_distribution<double> noise(0.0, cfg.noise);
    v.intensities.resize(v.voxels());
    for (int z = 0; z < cfg.depth; ++z)
        for (int y = 0; y < cfg.size; ++y)
            for (int x = 0; x < cfg.size; ++x) {
                const std::size_t i = z * v.plane() + static_cast<std::size_t>(y) * cfg.size + x;
                const double field = 1.0 + cfg.bias * std::sin(y / S * std::numbers::pi + by) *
                                                std::cos(x / S * std::numbers::pi + bx) *
                                                std::cos(z / std::max(cfg.depth, 1) * std::numbers::pi + bz);
                const double base = !override_level.empty() && override_level[i] >= 0 ? override_level[i] : level[v.labels[i]];
                double val = base * field;
                if (cfg.noise > 0) val += noise(rng);
                v.intensities[i] = std::clamp(val, 0.0, 1.0);
            }
    return v;
}

std::vector<Volume> generate_corpus(const SynthConfig& cfg, const std::string& prefix) {
    cfg.validate();
    std::vector<Volume> out;
    for (int i = 0; i < cfg.volumes; ++i) {
        char name[64];
        std::snprintf(name, sizeof name, "%s_%03d", prefix.c_str(), i);
        out.push_back(generate_volume(cfg, mix(cfg.seed, static_cast<std::uint64_t>(i)), name));
    }
    return out;
}

}  // namespace msf
