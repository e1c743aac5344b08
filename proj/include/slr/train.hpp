#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "json.hpp"
#include "slr/featurestore.hpp"
#include "slr/metrics.hpp"
#include "slr/model.hpp"

namespace slr {

struct AdamaxHyper {
    double learning_rate = 0.0012;
    double weight_decay = 0.0001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// One Adamax update with decoupled weight decay, applied coordinate-wise:
//   m <- b1 m + (1-b1) g;  u <- max(b2 u, |g|);  w <- w - lr m / ((1 - b1^t)(u + eps));  w <- w - lr wd w
// Throws TrainingDivergenceError on a non-finite gradient.
template <typename S>
void adamax_step(std::span<S> params, std::span<const S> grads, std::span<S> m, std::span<S> u, std::size_t t,
                 const AdamaxHyper& h);

// Optimizer state over a fixed parameter list.
template <typename S>
class Adamax {
public:
    Adamax(nn::ParamList<S> params, AdamaxHyper hyper);

    // Uses the gradients currently accumulated in the parameters, scaled by grad_scale.
    void step(double grad_scale = 1.0);
    std::size_t steps() const { return t_; }

private:
    nn::ParamList<S> params_;
    AdamaxHyper hyper_;
    std::vector<nn::Mat<S>> m_, u_;
    std::size_t t_ = 0;
};

struct TrainConfig {
    double learning_rate = 0.0012;
    double weight_decay = 0.0001;
    std::size_t epochs = 200;
    std::size_t batch_size = 32;
    double label_smoothing = 0.15;
    LossWeights loss_weights{};
    std::uint64_t seed = 0;
    StreamToggles streams{};
    std::size_t sequence_length = kDefaultSequenceLength;
    std::uint64_t eval_seed = 7;  // fixed length normalization for validation

    void validate() const;
    nlohmann::json to_json() const;
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_top1 = 0.0;
    double val_top5 = 0.0;
    double val_nll = 0.0;

    nlohmann::json to_json() const;
};

struct Checkpoint {
    FusionModel<float> model;
    std::size_t epoch = 0;
    double val_top1 = 0.0;
    double val_top5 = 0.0;
    double val_nll = 0.0;

    nlohmann::json meta() const;
};

struct TrainResult {
    Checkpoint best;
    std::vector<EpochLog> history;
    std::vector<double> best_so_far;  // best val top-1 after each epoch
};

// Mini-batch Adamax on the combined loss; keeps the epoch with the highest
// validation top-1, then lowest validation nll, then earliest. Writes one JSON line per epoch to log.
TrainResult train_model(const Dataset& data, const ModelConfig& model_cfg, const TrainConfig& cfg,
                        std::ostream* log = nullptr);

struct EvalResult {
    double top1 = 0.0;
    double top5 = 0.0;
    double nll = 0.0;
    ConfusionMatrix confusion;
    double mean_latency_ms = 0.0;
    std::vector<std::uint32_t> predictions;

    // Latency is wall-clock and therefore left out.
    nlohmann::json to_json() const;
};

// Strictly better: higher top-1, or equal top-1 and lower nll.
inline bool improves(double top1, double nll, double best_top1, double best_nll) {
    return top1 > best_top1 || (top1 == best_top1 && nll < best_nll);
}

// Rng seed for the length normalization of record i during evaluation.
std::uint64_t record_seed(std::uint64_t base, std::size_t index);

EvalResult evaluate(const ProbabilityFn& model, std::span<const FeatureSequence* const> records,
                    std::size_t num_classes, std::size_t sequence_length = kDefaultSequenceLength,
                    std::uint64_t eval_seed = 7);

}  // namespace slr
