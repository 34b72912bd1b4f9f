#include "msfseg/surrogate_fusion.hpp"

#include <string>

#include "msfseg/errors.hpp"
#include "msfseg/ops.hpp"

namespace msf {

namespace {

constexpr int kDepth = 4;

void check(const std::vector<MaskFeature>& masks, const char* op) {
    if (masks.empty()) throw InputError(std::string(op) + ": empty mask list");
    for (const auto& m : masks) {
        if (m.logits.rank() != 3 || m.logits.dim(0) != 2)
            throw InputError(std::string(op) + ": mask features must be [2,h,w]");
        if (m.logits.shape() != masks[0].logits.shape())
            throw InputError(std::string(op) + ": mask features differ in shape");
    }
}

std::vector<ag::Var> softmaxed(const std::vector<MaskFeature>& masks) {
    std::vector<ag::Var> out;
    out.reserve(masks.size());
    for (const auto& m : masks) out.push_back(ag::channel_softmax(m.logits));
    return out;
}

std::vector<ag::Var> raw(const std::vector<MaskFeature>& masks) {
    std::vector<ag::Var> out;
    out.reserve(masks.size());
    for (const auto& m : masks) out.push_back(m.logits);
    return out;
}

}  // namespace

ag::Var coherence(const std::vector<MaskFeature>& masks) {
    check(masks, "coherence");
    auto p = softmaxed(masks);
    return p.size() == 1 ? p[0] : ag::prod_n(p);
}

ag::Var diversity(const std::vector<MaskFeature>& masks) {
    check(masks, "diversity");
    auto p = softmaxed(masks);
    return p.size() == 1 ? p[0] : ag::add_n(p);
}

ag::Var channel_attention(const std::vector<MaskFeature>& masks) {
    check(masks, "channel_attention");
    std::vector<ag::Var> terms;
    terms.reserve(masks.size());
    for (const auto& m : masks) terms.push_back(ag::channel_scale(m.logits, ag::softmax(ag::global_avg_pool(m.logits))));
    return ag::mean_n(terms);
}

ag::Var average(const std::vector<MaskFeature>& masks) {
    check(masks, "average");
    return masks.size() == 1 ? masks[0].logits : ag::mean_n(raw(masks));
}

SurrogateBundle make_bundle(const std::vector<MaskFeature>& masks) {
    return {coherence(masks), diversity(masks), channel_attention(masks), average(masks)};
}

ag::Var stack_bundle(const SurrogateBundle& bundle) {
    const ag::Var* parts[kDepth] = {&bundle.coh, &bundle.div, &bundle.ca, &bundle.avg};
    for (const ag::Var* p : parts)
        if (p->shape() != bundle.coh.shape()) throw InputError("fuse: bundle shapes disagree");
    const int h = bundle.coh.dim(1), w = bundle.coh.dim(2);
    // Channel-major interleave: split every surrogate into its two channels and
    // order them (c, depth).
    std::vector<ag::Var> slices;
    for (int c = 0; c < 2; ++c)
        for (const ag::Var* p : parts) {
            const auto v = p->value();
            const std::size_t plane = static_cast<std::size_t>(h) * w;
            ag::Var src = *p;
            std::vector<double> data(v.begin() + static_cast<std::ptrdiff_t>(c * plane),
                                     v.begin() + static_cast<std::ptrdiff_t>((c + 1) * plane));
            slices.push_back(ag::make_result({1, h, w}, std::move(data), {src}, [c, plane](ag::Node& self) {
                double* g = self.parents[0]->grad_buf() + c * plane;
                for (std::size_t i = 0; i < plane; ++i) g[i] += self.grad[i];
            }));
        }
    return ag::concat_channels(slices);
}

SurrogateFusion::SurrogateFusion(FusionConfig cfg, ParamStore& store, std::mt19937_64& rng) : cfg_(cfg) {
    if (cfg_.out_channels < 1 || cfg_.out_channels % cfg_.norm_groups != 0 || cfg_.kernel % 2 == 0)
        throw ConfigError("fusion: bad config");
    const int k = cfg_.kernel;
    const std::size_t fan = static_cast<std::size_t>(2) * kDepth * k * k;
    // Stored as the [c_f, 2·4, k, k] view of the [c_f, 2, 4, k, k] kernel.
    w_ = store.add("fusion.conv3d.w", {cfg_.out_channels, 2 * kDepth, k, k}, he_normal(rng, cfg_.out_channels * fan, fan));
    b_ = store.add("fusion.conv3d.b", {cfg_.out_channels}, std::vector<double>(cfg_.out_channels, 0.0));
    gamma_ = store.add("fusion.norm.gamma", {cfg_.out_channels}, std::vector<double>(cfg_.out_channels, 1.0));
    beta_ = store.add("fusion.norm.beta", {cfg_.out_channels}, std::vector<double>(cfg_.out_channels, 0.0));
}

ag::Var SurrogateFusion::convolve(const SurrogateBundle& bundle) const {
    // A depth-4 kernel with no depth padding over a depth-4 input produces a
    // single output slice, which equals a 2D convolution over the flattened
    // (channel, depth) axis.
    return ag::conv2d(stack_bundle(bundle), w_, b_, 1, cfg_.kernel / 2);
}

ag::Var SurrogateFusion::fuse(const SurrogateBundle& bundle) const {
    return ag::relu(ag::group_norm(convolve(bundle), gamma_, beta_, cfg_.norm_groups));
}

}  // namespace msf
