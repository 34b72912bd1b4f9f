#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <vector>

#include "msfseg/image.hpp"
#include "msfseg/params.hpp"
#include "msfseg/tensor.hpp"

namespace msf {

struct BackboneConfig {
    int input_size = 384;
    /// Grayscale slices are replicated to this many stem input channels.
    int in_channels = 3;
    /// One entry per pyramid level; b = channels.size().
    std::vector<int> channels{64, 128, 256};
    int stem_stride = 4;
    int norm_groups = 4;

    int levels() const { return static_cast<int>(channels.size()); }
    int stride(int level) const { return stem_stride << level; }
    /// Throws ConfigError on inconsistent settings.
    void validate() const;
    bool operator==(const BackboneConfig&) const = default;
};

/// Per-scale feature maps of one image, finest first.
struct FeaturePyramid {
    std::vector<ag::Var> levels;  // level j: [c_j, h_j, w_j]
    std::vector<int> strides;

    int size() const { return static_cast<int>(levels.size()); }
};

/// Throws InputError unless sizes strictly shrink and strides strictly grow.
void validate(const FeaturePyramid& pyr);

struct PooledDescriptor {
    std::vector<double> vector;
    bool zero_norm = false;
};

/// Spatial mean of the deepest level followed by L2 normalization.
PooledDescriptor pooled_descriptor(const FeaturePyramid& pyr);

/// Cosine of two unit descriptors; zero when either is degenerate.
double cosine_similarity(const PooledDescriptor& a, const PooledDescriptor& b);

/// Anything that maps a slice to a feature pyramid.
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual FeaturePyramid extract(const Image2D& img) const = 0;
};

/// Toy trainable backbone: stride-4 patch stem, then b stages of
/// conv3×3 → group norm → ReLU with 2× average pooling between stages.
class ToyBackbone final : public FeatureExtractor {
public:
    /// Registers parameters under "backbone." in `store`.
    ToyBackbone(BackboneConfig cfg, ParamStore& store, std::mt19937_64& rng);

    FeaturePyramid extract(const Image2D& img) const override;
    const BackboneConfig& config() const { return cfg_; }

private:
    struct Stage {
        ag::Var w, b, gamma, beta;
    };
    BackboneConfig cfg_;
    ag::Var stem_w_, stem_b_;
    std::vector<Stage> stages_;
};

/// Serves externally computed pyramids (e.g. from a pretrained network),
/// keyed by the exact pixel content of the slice.
class PrecomputedFeatures final : public FeatureExtractor {
public:
    void add(const Image2D& img, FeaturePyramid pyr);
    FeaturePyramid extract(const Image2D& img) const override;
    std::size_t size() const { return table_.size(); }

private:
    static std::uint64_t key(const Image2D& img);
    std::map<std::uint64_t, FeaturePyramid> table_;
};

}  // namespace msf
