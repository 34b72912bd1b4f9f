#pragma once

// Small models and synthetic inputs shared by the test binaries.

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "msfseg/model.hpp"
#include "msfseg/surrogate_fusion.hpp"
#include "test_util.hpp"

namespace msf::testing {

inline ModelConfig mini_config() {
    ModelConfig cfg;
    cfg.backbone.input_size = 16;
    cfg.backbone.in_channels = 1;
    cfg.backbone.channels = {8, 8};
    cfg.attention.heads = 2;
    cfg.attention.head_channels = 4;
    cfg.fusion.out_channels = 4;
    cfg.decoder.channels = {8, 8};
    return cfg;
}

// Bright shape on a noisy dark background; square or disc.
inline std::pair<Image2D, Mask2D> shape_slice(std::mt19937_64& rng, int size, bool square) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double r = size * (0.15 + 0.1 * u(rng));
    const double cy = r + (size - 2 * r) * u(rng), cx = r + (size - 2 * r) * u(rng);
    Image2D img(size, size);
    Mask2D mask(size, size);
    std::normal_distribution<double> noise(0.0, 0.05);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double dy = y - cy, dx = x - cx;
            const bool in = square ? (std::abs(dy) <= r && std::abs(dx) <= r) : (dy * dy + dx * dx <= r * r);
            mask.at(y, x) = in ? 1 : 0;
            img.at(y, x) = std::clamp((in ? 0.7 : 0.2) + noise(rng), 0.0, 1.0);
        }
    return {img, mask};
}

inline SupportSequence support_of(const std::pair<Image2D, Mask2D>& s) { return {{s.first}, {s.second}}; }

inline std::vector<SupportSequence> random_supports(std::mt19937_64& rng, int n, int size) {
    std::vector<SupportSequence> out;
    for (int i = 0; i < n; ++i) out.push_back(support_of(shape_slice(rng, size, i % 2 == 0)));
    return out;
}

inline MaskFeature feature(ag::Var logits) { return {std::move(logits), 4}; }

inline std::vector<MaskFeature> random_features(std::mt19937_64& rng, int n, int h, int w, double amp = 2.0) {
    std::vector<MaskFeature> out;
    for (int i = 0; i < n; ++i) out.push_back(feature(random_param(rng, {2, h, w}, -amp, amp)));
    return out;
}

// Foreground probability of one logit pair.
inline double fg_prob(double z0, double z1) { return 1.0 / (1.0 + std::exp(z1 - z0)); }

}  // namespace msf::testing
