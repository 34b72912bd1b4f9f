#include "msfseg/train.hpp"

#include <cmath>
#include <sstream>

#include "msfseg/errors.hpp"
#include "msfseg/ops.hpp"

namespace msf {

Trainer::Trainer(MsfSegModel& model, const TrainConfig& cfg)
    : model_(model), cfg_(cfg), adam_(AdamConfig{.lr = cfg.lr}) {
    if (cfg_.lr < 0 || cfg_.batch_size < 1 || cfg_.n < 1 || cfg_.d < 1)
        throw ConfigError("train: lr must be >= 0 and batch_size, n, d positive");
}

double Trainer::step(const std::vector<TrainExample>& batch) {
    if (batch.empty()) throw InputError("train_episode: empty batch");
    model_.params().zero_grad();
    const double weight = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& ex = batch[i];
        ag::Var loss = segmentation_loss(model_.forward_logits(ex.query, ex.supports), ex.gt, cfg_.w_ce, cfg_.w_dice);
        const double value = loss.item();
        if (!std::isfinite(value)) {
            std::ostringstream os;
            os << "train_episode: non-finite loss " << value << " at batch element " << i << " (optimizer step "
               << adam_.steps() << ", " << ex.supports.size() << " supports)";
            throw NumericError(os.str());
        }
        total += value;
        ag::backward(ag::scale(loss, weight));
    }
    adam_.step(model_.params());
    return total * weight;
}

std::vector<double> smooth_curve(const std::vector<double>& losses, double alpha) {
    std::vector<double> out;
    out.reserve(losses.size());
    double s = 0.0;
    for (std::size_t i = 0; i < losses.size(); ++i) {
        s = i == 0 ? losses[0] : alpha * s + (1.0 - alpha) * losses[i];
        out.push_back(s);
    }
    return out;
}

}  // namespace msf
