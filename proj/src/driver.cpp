#include "msfseg/driver.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "msfseg/errors.hpp"
#include "msfseg/metrics.hpp"

namespace msf {

void EpisodicConfig::validate() const {
    if (steps < 0 || batch < 1 || n < 1 || d < 1) throw ConfigError("train: steps >= 0 and batch, n, d >= 1 required");
    if (train_classes.empty()) throw ConfigError("train: no training classes");
    if (!(lr >= 0) || !(min_lr >= 0)) throw ConfigError("train: learning rates must be >= 0");
}

TrainConfig EpisodicConfig::trainer_config() const {
    TrainConfig t;
    t.lr = lr;
    t.iterations = steps;
    t.batch_size = batch;
    t.n = n;
    t.vary_n = vary_n;
    t.d = d;
    t.seed = seed;
    t.w_ce = w_ce;
    t.w_dice = w_dice;
    return t;
}

double learning_rate(const EpisodicConfig& cfg, std::int64_t step) {
    if (cfg.schedule == Schedule::constant || cfg.steps <= 1) return cfg.lr;
    const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.steps - 1));
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

std::uint64_t step_seed(std::uint64_t seed, std::int64_t step) {
    std::uint64_t x = seed * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(step) + 0x632be59bd9b4e019ull;
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

int batch_n(const EpisodicConfig& cfg, std::int64_t step) {
    std::mt19937_64 rng(step_seed(cfg.seed, step));
    return cfg.vary_n ? std::uniform_int_distribution<int>(1, cfg.n)(rng) : cfg.n;
}

std::vector<TrainExample> episode_batch(const std::vector<Volume>& corpus, const EpisodicConfig& cfg, std::int64_t step,
                                        int size, std::vector<Episode>* episodes) {
    std::mt19937_64 rng(step_seed(cfg.seed, step));
    EpisodeSpec spec;
    spec.n = cfg.vary_n ? std::uniform_int_distribution<int>(1, cfg.n)(rng) : cfg.n;
    spec.d = cfg.d;
    spec.setting = cfg.setting;
    spec.test_classes = cfg.test_classes;
    spec.min_area = cfg.min_area;
    auto batch = sample_batch(corpus, cfg.train_classes, spec, cfg.batch, rng(), size, episodes);
    if (cfg.augment)
        for (auto& ex : batch) {
            const AugmentTransform t = random_transform(rng, cfg.ranges);
            ex.query = apply_transform(ex.query, t);
            ex.gt = apply_transform(ex.gt, t);
        }
    return batch;
}

StepRecord train_step(Trainer& trainer, const MsfSegModel& model, const std::vector<Volume>& corpus,
                      const EpisodicConfig& cfg, std::int64_t step) {
    StepRecord rec;
    rec.step = step;
    rec.d = cfg.d;
    rec.lr = learning_rate(cfg, step);
    const auto batch = episode_batch(corpus, cfg, step, model.config().backbone.input_size);
    rec.n = static_cast<int>(batch.front().supports.size());
    trainer.optimizer().set_lr(rec.lr);
    rec.loss = trainer.step(batch);
    return rec;
}

std::vector<EpisodeScore> evaluate_episodes(const MsfSegModel& model, const std::vector<Volume>& corpus,
                                            const EpisodeSpec& spec, int count, std::uint64_t seed) {
    ag::NoGradGuard ng;
    const int size = model.config().backbone.input_size;
    std::vector<EpisodeScore> out;
    for (int i = 0; i < count; ++i) {
        EpisodeScore s;
        s.episode = sample_episode(corpus, spec, step_seed(seed, i));
        const TrainExample ex = materialize(corpus, s.episode, size);
        s.dice = dice(model.forward(ex.query, ex.supports).mask, ex.gt);
        out.push_back(std::move(s));
    }
    return out;
}

double mean_dice(const std::vector<EpisodeScore>& scores) {
    if (scores.empty()) return 0.0;
    double s = 0.0;
    for (const auto& e : scores) s += e.dice;
    return s / static_cast<double>(scores.size());
}

}  // namespace msf
