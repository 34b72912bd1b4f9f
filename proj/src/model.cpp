#include "msfseg/model.hpp"

#include <cmath>
#include <string>

#include "msfseg/errors.hpp"
#include "msfseg/ops.hpp"

namespace msf {

void validate(const SupportSequence& s) {
    if (s.slices.empty()) throw InputError("support sequence: no slices");
    if (s.slices.size() != s.masks.size())
        throw InputError("support sequence: " + std::to_string(s.slices.size()) + " slices but " +
                         std::to_string(s.masks.size()) + " masks");
    for (std::size_t i = 0; i < s.slices.size(); ++i) {
        validate(s.slices[i]);
        validate(s.masks[i]);
        if (s.masks[i].h != s.slices[i].h || s.masks[i].w != s.slices[i].w)
            throw InputError("support sequence: mask/slice size mismatch");
    }
}

ModelConfig ModelConfig::desk(int input_size) {
    ModelConfig cfg;
    cfg.backbone.input_size = input_size;
    cfg.backbone.in_channels = 1;
    cfg.backbone.channels = {16, 32, 32};
    cfg.attention.heads = 4;
    cfg.attention.head_channels = 16;
    cfg.fusion.out_channels = 16;
    cfg.decoder.channels = {16, 16};
    return cfg;
}

QueryPrediction make_prediction(ag::Var logits) {
    QueryPrediction p;
    const int h = logits.dim(1), w = logits.dim(2);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    p.mask = Mask2D(h, w);
    double conf = 0.0;
    std::size_t count = 0;
    const auto z = logits.value();
    for (std::size_t i = 0; i < plane; ++i) {
        if (z[i] > z[plane + i]) {
            p.mask.bits[i] = 1;
            conf += 1.0 / (1.0 + std::exp(z[plane + i] - z[i]));
            ++count;
        }
    }
    p.fg_confidence = count ? conf / static_cast<double>(count) : 0.0;
    p.logits = std::move(logits);
    return p;
}

MsfSegModel::MsfSegModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
    cfg_.backbone.validate();
    int blocks = 0;
    for (int s = cfg_.backbone.stem_stride; s > 1; s /= 2) {
        if (s % 2 != 0) throw ConfigError("model: stem stride must be a power of two");
        ++blocks;
    }
    if (static_cast<int>(cfg_.decoder.channels.size()) != blocks)
        throw ConfigError("model: decoder needs " + std::to_string(blocks) + " upsampling blocks");

    std::mt19937_64 rng(seed);
    backbone_ = std::make_unique<ToyBackbone>(cfg_.backbone, params_, rng);
    attention_ = std::make_unique<MaskAttention>(cfg_.backbone, cfg_.attention, params_, rng);
    fusion_ = std::make_unique<SurrogateFusion>(cfg_.fusion, params_, rng);

    int in = cfg_.fusion.out_channels + 2 * cfg_.backbone.channels[0];
    for (std::size_t j = 0; j < cfg_.decoder.channels.size(); ++j) {
        const int out = cfg_.decoder.channels[j];
        if (out % cfg_.decoder.norm_groups != 0) throw ConfigError("decoder: width not divisible by norm groups");
        const std::string p = "decoder.block" + std::to_string(j + 1) + ".";
        DecoderBlock blk;
        if (cfg_.decoder.transposed) {
            blk.up_w = params_.add(p + "up.w", {in, in, 2, 2}, he_normal(rng, static_cast<std::size_t>(in) * in * 4, in));
            blk.up_b = params_.add(p + "up.b", {in}, std::vector<double>(in, 0.0));
        }
        const std::size_t fan = static_cast<std::size_t>(in) * 9;
        blk.w = params_.add(p + "conv.w", {out, in, 3, 3}, he_normal(rng, out * fan, fan));
        blk.b = params_.add(p + "conv.b", {out}, std::vector<double>(out, 0.0));
        blk.gamma = params_.add(p + "norm.gamma", {out}, std::vector<double>(out, 1.0));
        blk.beta = params_.add(p + "norm.beta", {out}, std::vector<double>(out, 0.0));
        decoder_.push_back(std::move(blk));
        in = out;
    }
    out_w_ = params_.add("decoder.out.w", {2, in, 1, 1}, he_normal(rng, 2 * in, in));
    out_b_ = params_.add("decoder.out.b", {2}, std::vector<double>(2, 0.0));
}

FeaturePyramid MsfSegModel::extract(const Image2D& img) const {
    return external_ ? external_->extract(img) : backbone_->extract(img);
}

PooledDescriptor MsfSegModel::describe(const Image2D& img) const {
    ag::NoGradGuard guard;
    return pooled_descriptor(extract(img));
}

std::vector<MaskFeature> MsfSegModel::mask_features(const FeaturePyramid& query,
                                                    const std::vector<std::vector<FeaturePyramid>>& supports,
                                                    const std::vector<SupportSequence>& seqs) const {
    std::vector<MaskFeature> out;
    out.reserve(supports.size());
    for (std::size_t i = 0; i < supports.size(); ++i)
        out.push_back(attention_->per_support(query, supports[i], seqs[i].masks));
    return out;
}

ag::Var MsfSegModel::forward_logits(const Image2D& query, const std::vector<SupportSequence>& supports) const {
    if (supports.empty()) throw InputError("forward: at least one support is required");
    for (const auto& s : supports) validate(s);

    const FeaturePyramid qp = extract(query);
    std::vector<std::vector<FeaturePyramid>> sp(supports.size());
    std::vector<ag::Var> skip_per_support;
    for (std::size_t i = 0; i < supports.size(); ++i) {
        std::vector<ag::Var> fine;
        for (const auto& slice : supports[i].slices) {
            sp[i].push_back(extract(slice));
            fine.push_back(sp[i].back().levels[0]);
        }
        skip_per_support.push_back(fine.size() == 1 ? fine[0] : ag::mean_n(fine));
    }
    const auto masks = mask_features(qp, sp, supports);
    const ag::Var fused = fusion_->fuse(make_bundle(masks));
    const ag::Var support_skip = skip_per_support.size() == 1 ? skip_per_support[0] : ag::mean_n(skip_per_support);

    ag::Var x = ag::concat_channels({fused, qp.levels[0], support_skip});
    for (const DecoderBlock& blk : decoder_) {
        x = cfg_.decoder.transposed ? ag::conv_transpose2x2(x, blk.up_w, blk.up_b) : ag::upsample_nearest(x, 2);
        x = ag::relu(ag::group_norm(ag::conv2d(x, blk.w, blk.b, 1, 1), blk.gamma, blk.beta, cfg_.decoder.norm_groups));
    }
    return ag::conv2d(x, out_w_, out_b_, 1, 0);
}

QueryPrediction MsfSegModel::forward(const Image2D& query, const std::vector<SupportSequence>& supports) const {
    return make_prediction(forward_logits(query, supports));
}

ag::Var segmentation_loss(const ag::Var& logits, const Mask2D& gt, double w_ce, double w_dice) {
    validate(gt);
    if (logits.rank() != 3 || logits.dim(1) != gt.h || logits.dim(2) != gt.w)
        throw InputError("loss: logits/mask shape mismatch");
    return ag::ce_dice_loss(logits, gt.bits, w_ce, w_dice);
}

}  // namespace msf
