#include "msfseg/backbone.hpp"

#include <bit>
#include <cmath>
#include <string>

#include "msfseg/errors.hpp"
#include "msfseg/ops.hpp"

namespace msf {

void BackboneConfig::validate() const {
    if (channels.empty()) throw ConfigError("backbone: at least one level required");
    if (in_channels < 1 || stem_stride < 1 || norm_groups < 1) throw ConfigError("backbone: bad config");
    for (int c : channels)
        if (c < 1 || c % norm_groups != 0)
            throw ConfigError("backbone: channel width " + std::to_string(c) +
                              " not divisible by norm_groups");
    const int deepest = stride(levels() - 1);
    if (input_size < deepest || input_size % deepest != 0)
        throw ConfigError("backbone: input size " + std::to_string(input_size) +
                          " must be a multiple of the deepest stride " + std::to_string(deepest));
}

void validate(const FeaturePyramid& pyr) {
    if (pyr.levels.size() < 2) throw InputError("pyramid: need at least 2 levels");
    if (pyr.strides.size() != pyr.levels.size()) throw InputError("pyramid: stride count mismatch");
    for (std::size_t j = 0; j < pyr.levels.size(); ++j) {
        if (pyr.levels[j].rank() != 3) throw InputError("pyramid: levels must be [C,H,W]");
        if (j == 0) continue;
        if (pyr.strides[j] <= pyr.strides[j - 1]) throw InputError("pyramid: strides must increase");
        if (pyr.levels[j].dim(1) >= pyr.levels[j - 1].dim(1) || pyr.levels[j].dim(2) >= pyr.levels[j - 1].dim(2))
            throw InputError("pyramid: spatial sizes must strictly decrease");
    }
}

PooledDescriptor pooled_descriptor(const FeaturePyramid& pyr) {
    if (pyr.levels.empty()) throw InputError("pooled_descriptor: empty pyramid");
    const ag::Var& deep = pyr.levels.back();
    const int c = deep.dim(0);
    const std::size_t plane = static_cast<std::size_t>(deep.dim(1)) * deep.dim(2);
    PooledDescriptor d;
    d.vector.assign(c, 0.0);
    for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += deep.value()[ch * plane + i];
        d.vector[ch] = s / static_cast<double>(plane);
    }
    double norm = 0.0;
    for (double v : d.vector) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) {
        d.zero_norm = true;
        return d;
    }
    for (double& v : d.vector) v /= norm;
    return d;
}

double cosine_similarity(const PooledDescriptor& a, const PooledDescriptor& b) {
    if (a.vector.size() != b.vector.size()) throw InputError("cosine_similarity: length mismatch");
    if (a.zero_norm || b.zero_norm) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.vector.size(); ++i) s += a.vector[i] * b.vector[i];
    return s;
}

ToyBackbone::ToyBackbone(BackboneConfig cfg, ParamStore& store, std::mt19937_64& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int k = cfg_.stem_stride;
    const int c0 = cfg_.channels[0];
    const std::size_t stem_fan = static_cast<std::size_t>(cfg_.in_channels) * k * k;
    stem_w_ = store.add("backbone.stem.w", {c0, cfg_.in_channels, k, k}, he_normal(rng, c0 * stem_fan, stem_fan));
    stem_b_ = store.add("backbone.stem.b", {c0}, std::vector<double>(c0, 0.0));
    int in = c0;
    for (int j = 0; j < cfg_.levels(); ++j) {
        const int out = cfg_.channels[j];
        const std::string p = "backbone.stage" + std::to_string(j + 1) + ".";
        const std::size_t fan = static_cast<std::size_t>(in) * 9;
        Stage s;
        s.w = store.add(p + "conv.w", {out, in, 3, 3}, he_normal(rng, out * fan, fan));
        s.b = store.add(p + "conv.b", {out}, std::vector<double>(out, 0.0));
        s.gamma = store.add(p + "norm.gamma", {out}, std::vector<double>(out, 1.0));
        s.beta = store.add(p + "norm.beta", {out}, std::vector<double>(out, 0.0));
        stages_.push_back(std::move(s));
        in = out;
    }
}

FeaturePyramid ToyBackbone::extract(const Image2D& img) const {
    validate(img);
    if (img.h != cfg_.input_size || img.w != cfg_.input_size)
        throw ConfigError("backbone: expected " + std::to_string(cfg_.input_size) + "x" +
                          std::to_string(cfg_.input_size) + " input, got " + std::to_string(img.h) +
                          "x" + std::to_string(img.w));
    std::vector<double> replicated;
    replicated.reserve(img.size() * cfg_.in_channels);
    for (int c = 0; c < cfg_.in_channels; ++c) replicated.insert(replicated.end(), img.pixels.begin(), img.pixels.end());
    ag::Var x = ag::Var::constant({cfg_.in_channels, img.h, img.w}, std::move(replicated));

    x = ag::conv2d(x, stem_w_, stem_b_, cfg_.stem_stride, 0);
    FeaturePyramid pyr;
    for (int j = 0; j < cfg_.levels(); ++j) {
        if (j > 0) x = ag::avg_pool(x, 2);
        const Stage& s = stages_[j];
        x = ag::relu(ag::group_norm(ag::conv2d(x, s.w, s.b, 1, 1), s.gamma, s.beta, cfg_.norm_groups));
        pyr.levels.push_back(x);
        pyr.strides.push_back(cfg_.stride(j));
    }
    return pyr;
}

std::uint64_t PrecomputedFeatures::key(const Image2D& img) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](std::uint64_t v) {
        h ^= v;
        h *= 1099511628211ull;
    };
    mix(static_cast<std::uint64_t>(img.h));
    mix(static_cast<std::uint64_t>(img.w));
    for (double v : img.pixels) mix(std::bit_cast<std::uint64_t>(v));
    return h;
}

void PrecomputedFeatures::add(const Image2D& img, FeaturePyramid pyr) {
    validate(pyr);
    table_[key(img)] = std::move(pyr);
}

FeaturePyramid PrecomputedFeatures::extract(const Image2D& img) const {
    auto it = table_.find(key(img));
    if (it == table_.end()) throw InputError("precomputed features: no pyramid registered for this slice");
    return it->second;
}

}  // namespace msf
