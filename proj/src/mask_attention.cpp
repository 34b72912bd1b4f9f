#include "msfseg/mask_attention.hpp"

#include <cmath>
#include <string>

#include "msfseg/errors.hpp"
#include "msfseg/ops.hpp"

namespace msf {

namespace {

double sinusoid(double pos, int i, int dim) {
    const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / std::max(dim, 1));
    return (i % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
}

}  // namespace

std::vector<double> positional_encoding(int h, int w, int dim, double slice_offset) {
    std::vector<double> pe(static_cast<std::size_t>(h) * w * dim);
    const int half = dim / 2;
    const int rest = dim - half;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double* row = pe.data() + (static_cast<std::size_t>(y) * w + x) * dim;
            for (int i = 0; i < half; ++i) row[i] = sinusoid(y, i, half);
            for (int i = 0; i < rest; ++i) row[half + i] = sinusoid(x, i, rest);
            if (slice_offset != 0.0)
                for (int i = 0; i < dim; ++i) row[i] += sinusoid(slice_offset, i, dim) - sinusoid(0.0, i, dim);
        }
    return pe;
}

MaskAttention::MaskAttention(const BackboneConfig& backbone, AttentionConfig cfg, ParamStore& store,
                             std::mt19937_64& rng)
    : backbone_(backbone), cfg_(std::move(cfg)) {
    const int b = backbone_.levels();
    if (!cfg_.embed.empty() && static_cast<int>(cfg_.embed.size()) != b)
        throw ConfigError("attention: embed list must have one entry per pyramid level");
    if (cfg_.heads < 1 || cfg_.head_channels % cfg_.norm_groups != 0)
        throw ConfigError("attention: bad heads/head_channels");
    for (int j = 0; j < b; ++j) {
        const int c = backbone_.channels[j];
        const int e = cfg_.embed.empty() ? c : cfg_.embed[j];
        if (e % cfg_.heads != 0)
            throw ConfigError("attention: embed width " + std::to_string(e) + " not divisible by heads");
        embed_.push_back(e);
        const std::string p = "attention.l" + std::to_string(j + 1) + ".";
        Level L;
        L.wq = store.add(p + "q.w", {c, e}, he_normal(rng, static_cast<std::size_t>(c) * e, c));
        L.bq = store.add(p + "q.b", {e}, std::vector<double>(e, 0.0));
        L.wk = store.add(p + "k.w", {c, e}, he_normal(rng, static_cast<std::size_t>(c) * e, c));
        L.bk = store.add(p + "k.b", {e}, std::vector<double>(e, 0.0));
        L.wv = store.add(p + "v.w", {1, e}, he_normal(rng, e, 1));
        L.bv = store.add(p + "v.b", {e}, std::vector<double>(e, 0.0));
        L.wo = store.add(p + "o.w", {e, 2}, he_normal(rng, static_cast<std::size_t>(e) * 2, e));
        L.bo = store.add(p + "o.b", {2}, std::vector<double>(2, 0.0));
        levels_.push_back(std::move(L));
    }
    const int hc = cfg_.head_channels;
    auto block = [&](const std::string& p, int in, int out) {
        ConvBlock blk;
        blk.w = store.add(p + ".w", {out, in, 3, 3}, he_normal(rng, static_cast<std::size_t>(out) * in * 9, in * 9));
        blk.b = store.add(p + ".b", {out}, std::vector<double>(out, 0.0));
        blk.gamma = store.add(p + ".gamma", {out}, std::vector<double>(out, 1.0));
        blk.beta = store.add(p + ".beta", {out}, std::vector<double>(out, 0.0));
        return blk;
    };
    head1_ = block("attention.head1", 2, hc);
    head2_ = block("attention.head2", hc, hc);
    out_w_ = store.add("attention.head_out.w", {2, hc, 1, 1}, he_normal(rng, 2 * hc, hc));
    out_b_ = store.add("attention.head_out.b", {2}, std::vector<double>(2, 0.0));
}

TokenSet MaskAttention::build_tokens(int level, const ag::Var& query_feat, const std::vector<ag::Var>& support_feats,
                                     const std::vector<Mask2D>& support_masks) const {
    if (level < 0 || level >= static_cast<int>(levels_.size())) throw InputError("build_tokens: bad level");
    if (support_feats.empty() || support_feats.size() != support_masks.size())
        throw InputError("build_tokens: support slice count (" + std::to_string(support_feats.size()) +
                         ") must equal mask count (" + std::to_string(support_masks.size()) + ") and be >= 1");
    const Level& L = levels_[level];
    const int c = query_feat.dim(0), h = query_feat.dim(1), w = query_feat.dim(2);
    const int d = static_cast<int>(support_feats.size());
    const int stride = backbone_.stride(level);

    TokenSet t;
    t.h = h;
    t.w = w;
    ag::Var pe = ag::Var::constant({h * w, c}, positional_encoding(h, w, c, 0.0));
    t.q = ag::linear(ag::add(ag::to_tokens(query_feat), pe), L.wq, L.bq);

    std::vector<ag::Var> keys;
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(d) * h * w);
    for (int s = 0; s < d; ++s) {
        const ag::Var& f = support_feats[s];
        if (f.shape() != query_feat.shape()) throw InputError("build_tokens: support/query level shape mismatch");
        const Mask2D& m = support_masks[s];
        validate(m);
        if (m.h != h * stride || m.w != w * stride) throw InputError("build_tokens: mask size does not match features");
        const double offset = s - (d - 1) / 2.0;
        ag::Var spe = ag::Var::constant({h * w, c}, positional_encoding(h, w, c, offset));
        keys.push_back(ag::add(ag::to_tokens(f), spe));
        const auto mv = downsample_mask(m, stride);
        values.insert(values.end(), mv.begin(), mv.end());
    }
    t.k = ag::linear(ag::concat_rows(keys), L.wk, L.bk);
    t.v_raw = ag::Var::constant({d * h * w, 1}, std::move(values));
    t.v = ag::linear(t.v_raw, L.wv, L.bv);
    return t;
}

ag::Var MaskAttention::scaled_attention(int level, const TokenSet& tokens, std::vector<double>* probs) const {
    const Level& L = levels_.at(level);
    ag::Var o = ag::multihead_attention(tokens.q, tokens.k, tokens.v, cfg_.heads, probs);
    return ag::from_tokens(ag::linear(o, L.wo, L.bo), tokens.h, tokens.w);
}

ag::Var MaskAttention::aggregate(const FeaturePyramid& query, const std::vector<FeaturePyramid>& support_slices,
                                 const std::vector<Mask2D>& support_masks) const {
    if (support_slices.empty()) throw InputError("per_support_mask_feature: empty support sequence");
    const int b = static_cast<int>(levels_.size());
    if (query.size() != b) throw InputError("per_support_mask_feature: pyramid depth mismatch");
    const int h0 = query.levels[0].dim(1), w0 = query.levels[0].dim(2);
    std::vector<ag::Var> maps;
    for (int j = 0; j < b; ++j) {
        std::vector<ag::Var> feats;
        for (const auto& sp : support_slices) {
            if (sp.size() != b) throw InputError("per_support_mask_feature: pyramid depth mismatch");
            feats.push_back(sp.levels[j]);
        }
        ag::Var a = scaled_attention(j, build_tokens(j, query.levels[j], feats, support_masks));
        maps.push_back(j == 0 ? a : ag::upsample_bilinear(a, h0, w0));
    }
    return maps.size() == 1 ? maps[0] : ag::add_n(maps);
}

ag::Var MaskAttention::head(const ag::Var& x) const {
    auto run = [this](const ag::Var& in, const ConvBlock& blk) {
        return ag::relu(ag::group_norm(ag::conv2d(in, blk.w, blk.b, 1, 1), blk.gamma, blk.beta, cfg_.norm_groups));
    };
    return ag::conv2d(run(run(x, head1_), head2_), out_w_, out_b_, 1, 0);
}

MaskFeature MaskAttention::per_support(const FeaturePyramid& query, const std::vector<FeaturePyramid>& support_slices,
                                       const std::vector<Mask2D>& support_masks) const {
    return {head(aggregate(query, support_slices, support_masks)), backbone_.stride(0)};
}

}  // namespace msf
