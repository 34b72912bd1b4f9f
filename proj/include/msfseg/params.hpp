#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "msfseg/tensor.hpp"

namespace msf {

/// Named, insertion-ordered trainable tensors. Names are dotted paths
/// ("backbone.stage1.conv.w") and are the keys used in checkpoints.
class ParamStore {
public:
    ag::Var add(const std::string& name, ag::Shape shape, std::vector<double> init);

    const ag::Var& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.contains(name); }

    const std::vector<std::pair<std::string, ag::Var>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    std::size_t total_elements() const;

    void zero_grad();

    /// Copies values of every parameter in insertion order.
    std::vector<double> flatten() const;
    void assign(const std::vector<double>& flat);

    /// FNV-1a over names, shapes and value bits of parameters whose name starts with prefix.
    std::uint64_t fingerprint(const std::string& prefix = "") const;

private:
    std::vector<std::pair<std::string, ag::Var>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// He-style normal init: N(0, 2/fan_in).
std::vector<double> he_normal(std::mt19937_64& rng, std::size_t count, std::size_t fan_in);

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First-order adaptive optimizer with per-parameter moment buffers.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    /// Applies one update from the gradients currently accumulated in `params`.
    void step(ParamStore& params);

    const AdamConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    std::int64_t steps() const { return t_; }

    struct Moments {
        std::vector<double> m, v;
    };
    const std::unordered_map<std::string, Moments>& state() const { return state_; }
    void restore(std::int64_t t, std::unordered_map<std::string, Moments> state) {
        t_ = t;
        state_ = std::move(state);
    }

private:
    AdamConfig cfg_;
    std::int64_t t_ = 0;
    std::unordered_map<std::string, Moments> state_;
};

}  // namespace msf
