#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "msfseg/backbone.hpp"
#include "msfseg/image.hpp"
#include "msfseg/mask_attention.hpp"
#include "msfseg/params.hpp"
#include "msfseg/surrogate_fusion.hpp"

namespace msf {

/// d consecutive labeled slices used jointly as one support (d = 1 is a 2D support).
struct SupportSequence {
    std::vector<Image2D> slices;
    std::vector<Mask2D> masks;

    int depth() const { return static_cast<int>(slices.size()); }
};

/// Throws InputError when slice/mask counts differ, the sequence is empty or masks are not binary.
void validate(const SupportSequence& s);

struct DecoderConfig {
    std::vector<int> channels{32, 16};  // one entry per 2× upsampling block
    bool transposed = false;            // transposed conv instead of nearest-neighbour upsampling
    int norm_groups = 4;
    bool operator==(const DecoderConfig&) const = default;
};

struct ModelConfig {
    BackboneConfig backbone;
    AttentionConfig attention;
    FusionConfig fusion;
    DecoderConfig decoder;
    bool operator==(const ModelConfig&) const = default;

    /// Small configuration used for desk-scale training runs.
    static ModelConfig desk(int input_size = 64);
};

struct QueryPrediction {
    ag::Var logits;  // [2, h, w]
    Mask2D mask;     // channel argmax (foreground where logit0 > logit1)
    double fg_confidence = 0.0;  // mean foreground probability over predicted foreground
};

/// Derives mask and confidence from logits.
QueryPrediction make_prediction(ag::Var logits);

/// Backbone → per-support mask attention → surrogate fusion → skip-connected decoder.
class MsfSegModel {
public:
    MsfSegModel(ModelConfig cfg, std::uint64_t seed);

    /// Full-resolution query prediction from n ≥ 1 supports.
    QueryPrediction forward(const Image2D& query, const std::vector<SupportSequence>& supports) const;
    ag::Var forward_logits(const Image2D& query, const std::vector<SupportSequence>& supports) const;

    /// Per-support mask features for the query (before fusion).
    std::vector<MaskFeature> mask_features(const FeaturePyramid& query,
                                           const std::vector<std::vector<FeaturePyramid>>& supports,
                                           const std::vector<SupportSequence>& seqs) const;

    FeaturePyramid extract(const Image2D& img) const;
    PooledDescriptor describe(const Image2D& img) const;

    /// Replace the toy backbone's features by an external extractor (nullptr restores it).
    void set_feature_source(std::shared_ptr<const FeatureExtractor> source) { external_ = std::move(source); }

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const ModelConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }

    /// Identifies the backbone weights; pools cache descriptors under this stamp.
    std::uint64_t backbone_fingerprint() const { return params_.fingerprint("backbone."); }

    const ToyBackbone& backbone() const { return *backbone_; }
    const MaskAttention& attention() const { return *attention_; }
    const SurrogateFusion& fusion() const { return *fusion_; }

private:
    struct DecoderBlock {
        ag::Var up_w, up_b;  // transposed-conv variant only
        ag::Var w, b, gamma, beta;
    };
    ModelConfig cfg_;
    std::uint64_t seed_;
    ParamStore params_;
    std::unique_ptr<ToyBackbone> backbone_;
    std::unique_ptr<MaskAttention> attention_;
    std::unique_ptr<SurrogateFusion> fusion_;
    std::vector<DecoderBlock> decoder_;
    ag::Var out_w_, out_b_;
    std::shared_ptr<const FeatureExtractor> external_;
};

/// Cross-entropy + soft Dice with the given weights; see ag::ce_dice_loss.
ag::Var segmentation_loss(const ag::Var& logits, const Mask2D& gt, double w_ce = 1.0, double w_dice = 1.0);

}  // namespace msf
