#pragma once

// Differentiable ops. Image-like tensors are [C, H, W]; token matrices are
// [rows, dim]; vectors are [n]; scalars are [1].

#include <cstdint>
#include <span>
#include <vector>

#include "msfseg/tensor.hpp"

namespace msf::ag {

Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_n(const std::vector<Var>& xs);
Var mean_n(const std::vector<Var>& xs);
Var prod_n(const std::vector<Var>& xs);
Var sum(const Var& a);
Var reshape(const Var& a, Shape shape);

Var relu(const Var& x);

/// x [C,H,W], w [O,C,k,k], b [O] (may be undefined) → [O,Ho,Wo].
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

/// 2×2 stride-2 transposed convolution. w [C,O,2,2], b [O] → [O,2H,2W].
Var conv_transpose2x2(const Var& x, const Var& w, const Var& b);

/// Group normalization over (C/groups)×H×W blocks, per-channel affine.
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);

/// Non-overlapping k×k average pooling; H and W must be multiples of k.
Var avg_pool(const Var& x, int k);

/// Half-pixel bilinear resampling to (out_h, out_w).
Var upsample_bilinear(const Var& x, int out_h, int out_w);
Var upsample_nearest(const Var& x, int factor);

Var concat_channels(const std::vector<Var>& xs);

/// Softmax across the channel axis at every pixel of a [C,H,W] map.
Var channel_softmax(const Var& x);
/// [C,H,W] → [C] spatial mean.
Var global_avg_pool(const Var& x);
/// Softmax of a [n] vector.
Var softmax(const Var& v);
/// x [C,H,W] scaled per channel by w [C].
Var channel_scale(const Var& x, const Var& w);

/// [C,H,W] → [H·W, C] (one row per pixel, row-major pixel order).
Var to_tokens(const Var& x);
/// [H·W, C] → [C,H,W].
Var from_tokens(const Var& t, int h, int w);
Var concat_rows(const std::vector<Var>& xs);

/// x [n,in] · w [in,out] + b [out] (b may be undefined).
Var linear(const Var& x, const Var& w, const Var& b);

/// Multi-head scaled dot-product attention. Q [m,e], K [n,e], V [n,e]; e is
/// split into `heads` contiguous column blocks, each scaled by 1/√(e/heads).
/// When `probs` is non-null it receives the heads×m×n softmax weights.
Var multihead_attention(const Var& q, const Var& k, const Var& v, int heads,
                        std::vector<double>* probs = nullptr);

/// Pixel cross-entropy (mean) · w_ce + soft Dice loss on the foreground
/// probability · w_dice. Channel 0 of logits is foreground. target is 0/1 per pixel.
Var ce_dice_loss(const Var& logits, std::span<const std::uint8_t> target, double w_ce = 1.0,
                 double w_dice = 1.0);

}  // namespace msf::ag
