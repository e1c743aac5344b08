#include "slr/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "slr/errors.hpp"

namespace slr {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

}  // namespace

std::uint64_t record_seed(std::uint64_t base, std::size_t index) {
    return splitmix64(base * 0x100000001B3ull + static_cast<std::uint64_t>(index));
}

template <typename S>
void adamax_step(std::span<S> params, std::span<const S> grads, std::span<S> m, std::span<S> u, std::size_t t,
                 const AdamaxHyper& h) {
    if (t < 1) throw ArgumentError("adamax step index starts at 1");
    if (grads.size() != params.size() || m.size() != params.size() || u.size() != params.size())
        throw ArgumentError("adamax: shape mismatch");
    const double bias = 1.0 - std::pow(h.beta1, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = static_cast<double>(grads[i]);
        if (!std::isfinite(g)) throw TrainingDivergenceError("non-finite gradient");
        const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * g;
        const double ui = std::max(h.beta2 * static_cast<double>(u[i]), std::abs(g));
        double w = static_cast<double>(params[i]);
        w -= h.learning_rate * mi / (bias * (ui + h.epsilon));
        w -= h.learning_rate * h.weight_decay * w;
        m[i] = static_cast<S>(mi);
        u[i] = static_cast<S>(ui);
        params[i] = static_cast<S>(w);
    }
}

template void adamax_step<float>(std::span<float>, std::span<const float>, std::span<float>, std::span<float>,
                                 std::size_t, const AdamaxHyper&);
template void adamax_step<double>(std::span<double>, std::span<const double>, std::span<double>, std::span<double>,
                                  std::size_t, const AdamaxHyper&);

template <typename S>
Adamax<S>::Adamax(nn::ParamList<S> params, AdamaxHyper hyper) : params_(std::move(params)), hyper_(hyper) {
    if (!(hyper_.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    for (const auto* p : params_) {
        m_.push_back(nn::Mat<S>::Zero(p->value.rows(), p->value.cols()));
        u_.push_back(nn::Mat<S>::Zero(p->value.rows(), p->value.cols()));
    }
}

template <typename S>
void Adamax<S>::step(double grad_scale) {
    ++t_;
    nn::Mat<S> scaled;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto* p = params_[i];
        scaled = p->grad * static_cast<S>(grad_scale);
        const auto n = static_cast<std::size_t>(p->value.size());
        adamax_step<S>({p->value.data(), n}, {scaled.data(), n}, {m_[i].data(), n}, {u_[i].data(), n}, t_, hyper_);
    }
}

template class Adamax<float>;
template class Adamax<double>;

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("label_smoothing must lie in [0,1)");
    if (sequence_length < 1) throw ConfigError("sequence_length must be at least 1");
    if (!streams.a && !streams.b && !streams.c) throw ConfigError("at least one stream must stay enabled");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"learning_rate", learning_rate},
            {"weight_decay", weight_decay},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"label_smoothing", label_smoothing},
            {"class_loss_weight", loss_weights.class_weight},
            {"embedding_loss_weight", loss_weights.embedding_weight},
            {"seed", seed},
            {"streams", {{"A", streams.a}, {"B", streams.b}, {"C", streams.c}}},
            {"sequence_length", sequence_length},
            {"eval_seed", eval_seed}};
}

nlohmann::json EpochLog::to_json() const {
    return {{"epoch", epoch}, {"train_loss", train_loss}, {"val_top1", val_top1}, {"val_top5", val_top5}, {"val_nll", val_nll}};
}

nlohmann::json Checkpoint::meta() const {
    return {{"epoch", epoch}, {"val_top1", val_top1}, {"val_top5", val_top5}, {"val_nll", val_nll}};
}

TrainResult train_model(const Dataset& data, const ModelConfig& model_cfg, const TrainConfig& cfg, std::ostream* log) {
    cfg.validate();
    model_cfg.validate();
    const auto train = data.split(Split::Train);
    const auto val = data.split(Split::Val);
    if (train.empty()) throw ConfigError("training split is empty");
    if (val.empty()) throw ConfigError("validation split is empty");
    const std::size_t K = data.num_classes();
    if (model_cfg.num_classes != K)
        throw ConfigError("model has " + std::to_string(model_cfg.num_classes) + " classes, dataset has " +
                          std::to_string(K));
    data.embeddings.validate(K);
    if (model_cfg.embedding_dim != kEmbeddingDim) throw ConfigError("embedding head must match the embedding table");

    FusionModel<float> model(model_cfg);
    model.init(splitmix64(cfg.seed ^ 0x1));
    Adamax<float> opt(model.parameters(), {cfg.learning_rate, cfg.weight_decay});
    nn::Rng rng(splitmix64(cfg.seed ^ 0x2));
    nn::Dropout dropout{rng, 0.0};

    std::vector<std::vector<double>> targets(K);
    for (std::size_t k = 0; k < K; ++k) targets[k] = label_smooth(one_hot(K, k), cfg.label_smoothing);

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::optional<Checkpoint> best;
    TrainResult result{Checkpoint{model, 0, 0.0, 0.0, 0.0}, {}, {}};
    typename FusionModel<float>::Cache cache;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            model.zero_grad();
            for (std::size_t i = start; i < end; ++i) {
                const auto& rec = *train[order[i]];
                auto batch = assemble_streams(rec, cfg.sequence_length, rng);
                apply_toggles(batch, cfg.streams);
                const auto out = model.forward(batch, &cache, &dropout);
                const auto label = *rec.label_id;
                const auto g = loss_and_gradient<float>(out, targets[label], data.embeddings.vectors[label],
                                                        cfg.loss_weights);
                if (!std::isfinite(g.loss)) throw TrainingDivergenceError("non-finite loss at epoch " + std::to_string(epoch));
                model.backward(cache, g.dlogits, g.dembedding);
                loss_sum += g.loss;
            }
            opt.step(1.0 / static_cast<double>(end - start));
        }

        const auto eval = evaluate(make_probability_fn(model, cfg.streams), val, K, cfg.sequence_length, cfg.eval_seed);
        EpochLog entry{epoch, loss_sum / static_cast<double>(train.size()), eval.top1, eval.top5, eval.nll};
        if (!best || improves(eval.top1, eval.nll, best->val_top1, best->val_nll))
            best = Checkpoint{model, epoch, eval.top1, eval.top5, eval.nll};
        result.history.push_back(entry);
        result.best_so_far.push_back(best->val_top1);
        if (log) *log << entry.to_json().dump() << '\n' << std::flush;
    }
    result.best = std::move(*best);
    return result;
}

nlohmann::json EvalResult::to_json() const {
    return {{"top1", top1}, {"top5", top5}, {"nll", nll}, {"confusion_matrix", confusion}, {"predictions", predictions}};
}

EvalResult evaluate(const ProbabilityFn& model, std::span<const FeatureSequence* const> records,
                    std::size_t num_classes, std::size_t sequence_length, std::uint64_t eval_seed) {
    if (records.empty()) throw ArgumentError("cannot evaluate an empty split");
    EvalResult r;
    std::vector<std::vector<double>> probs;
    std::vector<std::uint32_t> labels;
    double latency_ms = 0.0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& rec = *records[i];
        if (!rec.label_id) throw ArgumentError("evaluation record without a label");
        const auto t0 = std::chrono::steady_clock::now();
        nn::Rng rng(record_seed(eval_seed, i));
        const auto batch = assemble_streams(rec, sequence_length, rng);
        auto p = model(batch);
        latency_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (p.size() != num_classes) throw ArgumentError("classifier returned the wrong number of classes");
        r.predictions.push_back(static_cast<std::uint32_t>(topk_indices(p, 1).front()));
        probs.push_back(std::move(p));
        labels.push_back(*rec.label_id);
    }
    r.top1 = topk_accuracy(probs, labels, 1);
    r.top5 = topk_accuracy(probs, labels, 5);
    r.nll = mean_nll(probs, labels);
    r.confusion = confusion_matrix(r.predictions, labels, num_classes);
    r.mean_latency_ms = latency_ms / static_cast<double>(records.size());
    return r;
}

}  // namespace slr
