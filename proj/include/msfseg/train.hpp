#pragma once

#include <cstdint>
#include <vector>

#include "msfseg/model.hpp"
#include "msfseg/params.hpp"

namespace msf {

struct TrainConfig {
    double lr = 1e-4;
    int iterations = 200;
    int batch_size = 4;
    int n = 1;             // supports per episode (upper bound when vary_n)
    bool vary_n = false;   // draw n uniformly from [1, n] per batch
    int d = 1;             // slices per support sequence
    std::uint64_t seed = 0;
    double w_ce = 1.0;
    double w_dice = 1.0;
    /// Exponential smoothing factor of the reported loss curve.
    double smoothing = 0.9;
};

struct TrainExample {
    Image2D query;
    std::vector<SupportSequence> supports;
    Mask2D gt;
};

/// Owns the optimizer state for one model; one gradient step per call.
class Trainer {
public:
    Trainer(MsfSegModel& model, const TrainConfig& cfg);

    /// Mean loss over the batch before the update. Throws NumericError on a non-finite loss.
    double step(const std::vector<TrainExample>& batch);

    Adam& optimizer() { return adam_; }
    const Adam& optimizer() const { return adam_; }

private:
    MsfSegModel& model_;
    TrainConfig cfg_;
    Adam adam_;
};

/// Exponentially smoothed copy of a loss curve.
std::vector<double> smooth_curve(const std::vector<double>& losses, double alpha);

}  // namespace msf
