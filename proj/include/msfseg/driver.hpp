#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msfseg/augment.hpp"
#include "msfseg/episode.hpp"
#include "msfseg/model.hpp"
#include "msfseg/train.hpp"
#include "msfseg/volume.hpp"

namespace msf {

enum class Schedule { constant, cosine };

/// Episodic training over a volume corpus. Batch `step` depends only on
/// (seed, step), so a run resumed from a checkpoint continues bit-identically.
struct EpisodicConfig {
    int steps = 200;
    int batch = 4;
    int n = 1;            // supports per episode (upper bound when vary_n)
    bool vary_n = false;  // draw n uniformly from [1, n] per batch
    int d = 1;
    Setting setting = Setting::one;
    std::vector<int> train_classes;
    std::vector<int> test_classes;
    std::size_t min_area = 1;
    bool augment = false;  // random geometric/intensity transform of each query and its mask
    AugmentRanges ranges;
    double lr = 1e-4;
    Schedule schedule = Schedule::constant;
    double min_lr = 0.0;  // cosine floor
    double w_ce = 1.0;
    double w_dice = 1.0;
    std::uint64_t seed = 0;

    /// Throws ConfigError on non-positive sizes or an empty class list.
    void validate() const;
    TrainConfig trainer_config() const;
};

double learning_rate(const EpisodicConfig& cfg, std::int64_t step);

std::uint64_t step_seed(std::uint64_t seed, std::int64_t step);

/// Supports per episode at `step` (the first draw of the step's generator).
int batch_n(const EpisodicConfig& cfg, std::int64_t step);

/// The mini-batch used at `step`; `episodes` receives the sampled episodes.
std::vector<TrainExample> episode_batch(const std::vector<Volume>& corpus, const EpisodicConfig& cfg, std::int64_t step,
                                        int size, std::vector<Episode>* episodes = nullptr);

struct StepRecord {
    std::int64_t step = 0;
    int n = 0;  // supports per episode in this batch
    int d = 0;
    double lr = 0.0;
    double loss = 0.0;
};

/// One optimizer step on episode_batch(step).
StepRecord train_step(Trainer& trainer, const MsfSegModel& model, const std::vector<Volume>& corpus,
                      const EpisodicConfig& cfg, std::int64_t step);

struct EpisodeScore {
    Episode episode;
    double dice = 0.0;
};

/// Mean Dice over `count` episodes, each sampled from (seed, index); queries and
/// supports are resampled to the model input and scored there.
std::vector<EpisodeScore> evaluate_episodes(const MsfSegModel& model, const std::vector<Volume>& corpus,
                                            const EpisodeSpec& spec, int count, std::uint64_t seed);

double mean_dice(const std::vector<EpisodeScore>& scores);

}  // namespace msf
