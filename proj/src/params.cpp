#include "msfseg/params.hpp"

#include <bit>
#include <cmath>

#include "msfseg/errors.hpp"

namespace msf {

ag::Var ParamStore::add(const std::string& name, ag::Shape shape, std::vector<double> init) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
    ag::Var v = ag::Var::parameter(std::move(shape), std::move(init));
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, v);
    return v;
}

const ag::Var& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return entries_[it->second].second;
}

std::size_t ParamStore::total_elements() const {
    std::size_t n = 0;
    for (const auto& [_, v] : entries_) n += v.numel();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& [_, v] : entries_) v.zero_grad();
}

std::vector<double> ParamStore::flatten() const {
    std::vector<double> out;
    out.reserve(total_elements());
    for (const auto& [_, v] : entries_) out.insert(out.end(), v.value().begin(), v.value().end());
    return out;
}

void ParamStore::assign(const std::vector<double>& flat) {
    if (flat.size() != total_elements()) throw InputError("ParamStore::assign: size mismatch");
    std::size_t off = 0;
    for (auto& [_, v] : entries_) {
        auto dst = v.mutable_value();
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                  flat.begin() + static_cast<std::ptrdiff_t>(off + dst.size()), dst.begin());
        off += dst.size();
    }
}

std::uint64_t ParamStore::fingerprint(const std::string& prefix) const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](std::uint64_t x) {
        for (int i = 0; i < 8; ++i) {
            h ^= (x >> (8 * i)) & 0xffu;
            h *= 1099511628211ull;
        }
    };
    for (const auto& [name, v] : entries_) {
        if (name.compare(0, prefix.size(), prefix) != 0) continue;
        for (char ch : name) mix(static_cast<unsigned char>(ch));
        for (int d : v.shape()) mix(static_cast<std::uint64_t>(d));
        for (double x : v.value()) mix(std::bit_cast<std::uint64_t>(x));
    }
    return h;
}

std::vector<double> he_normal(std::mt19937_64& rng, std::size_t count, std::size_t fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<double> out(count);
    for (double& x : out) x = dist(rng);
    return out;
}

void Adam::step(ParamStore& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, var] : params.entries()) {
        const auto g = var.grad();
        if (g.empty()) continue;
        auto& mom = state_[name];
        if (mom.m.empty()) {
            mom.m.assign(var.numel(), 0.0);
            mom.v.assign(var.numel(), 0.0);
        }
        auto p = ag::Var(var).mutable_value();
        for (std::size_t i = 0; i < p.size(); ++i) {
            mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * g[i];
            mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = mom.m[i] / bc1;
            const double vhat = mom.v[i] / bc2;
            p[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

}  // namespace msf
