#pragma once

#include <random>
#include <vector>

#include "msfseg/backbone.hpp"
#include "msfseg/image.hpp"
#include "msfseg/params.hpp"

namespace msf {

struct AttentionConfig {
    int heads = 4;
    /// Projection width per level; empty means "same as the level's channel width".
    std::vector<int> embed;
    /// Width of the cascaded conv head that turns the summed attention maps into a MaskFeature.
    int head_channels = 16;
    int norm_groups = 4;
    bool operator==(const AttentionConfig&) const = default;
};

/// Two-channel (channel 0 = foreground, 1 = background) logit map predicted for
/// the query from a single support.
struct MaskFeature {
    ag::Var logits;  // [2, h', w']
    int stride = 4;
};

struct TokenSet {
    ag::Var q;      // [h_j·w_j, e]
    ag::Var k;      // [d·h_j·w_j, e]
    ag::Var v_raw;  // [d·h_j·w_j, 1] box-downsampled mask values
    ag::Var v;      // [d·h_j·w_j, e] projected values
    int h = 0;
    int w = 0;
};

/// Fixed 2D sinusoidal table [h·w, dim]: first half of the width encodes the
/// row, second half the column. `slice_offset` adds a slice-index sinusoid
/// (zero at offset 0) so tokens of different sequence slices stay distinct.
std::vector<double> positional_encoding(int h, int w, int dim, double slice_offset);

class MaskAttention {
public:
    /// Registers parameters under "attention." in `store`.
    MaskAttention(const BackboneConfig& backbone, AttentionConfig cfg, ParamStore& store, std::mt19937_64& rng);

    /// Query tokens from one pyramid level; key/value tokens from the same level of
    /// each slice in the support sequence, concatenated slice after slice.
    TokenSet build_tokens(int level, const ag::Var& query_feat, const std::vector<ag::Var>& support_feats,
                          const std::vector<Mask2D>& support_masks) const;

    /// Multi-head attention followed by the output projection → [2, h_j, w_j].
    ag::Var scaled_attention(int level, const TokenSet& tokens, std::vector<double>* probs = nullptr) const;

    /// Sum of the per-level attention maps at the finest level's resolution,
    /// before the conv head.
    ag::Var aggregate(const FeaturePyramid& query, const std::vector<FeaturePyramid>& support_slices,
                      const std::vector<Mask2D>& support_masks) const;

    /// aggregate() followed by the cascaded conv head.
    MaskFeature per_support(const FeaturePyramid& query, const std::vector<FeaturePyramid>& support_slices,
                            const std::vector<Mask2D>& support_masks) const;

    ag::Var head(const ag::Var& aggregated) const;

    const AttentionConfig& config() const { return cfg_; }
    int embed_width(int level) const { return embed_[level]; }

private:
    struct Level {
        ag::Var wq, bq, wk, bk, wv, bv, wo, bo;
    };
    struct ConvBlock {
        ag::Var w, b, gamma, beta;
    };
    BackboneConfig backbone_;
    AttentionConfig cfg_;
    std::vector<int> embed_;
    std::vector<Level> levels_;
    ConvBlock head1_, head2_;
    ag::Var out_w_, out_b_;
};

}  // namespace msf
