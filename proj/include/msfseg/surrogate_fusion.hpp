#pragma once

#include <random>
#include <vector>

#include "msfseg/mask_attention.hpp"
#include "msfseg/params.hpp"

namespace msf {

/// The four fusion surrogates, each a [2, h', w'] map.
struct SurrogateBundle {
    ag::Var coh;  // product of channel-softmaxed masks
    ag::Var div;  // sum of channel-softmaxed masks
    ag::Var ca;   // mean of masks reweighted by softmax of their channel means
    ag::Var avg;  // mean of raw logits
};

ag::Var coherence(const std::vector<MaskFeature>& masks);
ag::Var diversity(const std::vector<MaskFeature>& masks);
ag::Var channel_attention(const std::vector<MaskFeature>& masks);
ag::Var average(const std::vector<MaskFeature>& masks);

SurrogateBundle make_bundle(const std::vector<MaskFeature>& masks);

/// Stacks the bundle into a [2·4, h', w'] map ordered (mask channel, surrogate):
/// index = channel·4 + depth with depth order coh, div, ca, avg. This is the
/// memory layout of a [2, 4, h', w'] volume.
ag::Var stack_bundle(const SurrogateBundle& bundle);

struct FusionConfig {
    int out_channels = 16;
    int kernel = 3;
    int norm_groups = 4;
    bool operator==(const FusionConfig&) const = default;
};

/// 3D convolution whose kernel spans the full surrogate depth (4), collapsing it
/// to one slice, followed by group norm and ReLU.
class SurrogateFusion {
public:
    /// Registers parameters under "fusion." in `store`.
    SurrogateFusion(FusionConfig cfg, ParamStore& store, std::mt19937_64& rng);

    /// Raw 3D convolution output [c_f, h', w'].
    ag::Var convolve(const SurrogateBundle& bundle) const;
    /// convolve() → norm → ReLU.
    ag::Var fuse(const SurrogateBundle& bundle) const;

    const FusionConfig& config() const { return cfg_; }
    /// Weight viewed as [c_f, 2, 4, k, k].
    const ag::Var& weight() const { return w_; }
    const ag::Var& bias() const { return b_; }

private:
    FusionConfig cfg_;
    ag::Var w_, b_, gamma_, beta_;
};

}  // namespace msf
