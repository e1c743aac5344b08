#include "slr/ensemble_ga.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "slr/errors.hpp"

namespace slr {

namespace {

std::uint64_t mix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

std::uint64_t eval_seed_for(std::uint64_t seed, std::size_t generation, std::size_t slot) {
    return mix(mix(seed ^ 0xA5A5A5A5ull) + 0x10000ull * generation + slot);
}

int random_width(nn::Rng& rng) {
    return std::uniform_int_distribution<int>(1, kMaxLayerWidth)(rng);
}

double uniform01(nn::Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

template <typename S>
nn::RowVec<S> to_row(std::span<const double> a, std::span<const double> b) {
    nn::RowVec<S> v(static_cast<Eigen::Index>(a.size() + b.size()));
    for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = static_cast<S>(a[i]);
    for (std::size_t i = 0; i < b.size(); ++i) v(static_cast<Eigen::Index>(a.size() + i)) = static_cast<S>(b[i]);
    return v;
}

}  // namespace

// ---------------------------------------------------------------- Chromosome

bool Chromosome::is_valid() const {
    const int L = genes[0];
    if (L < 1 || L > kMaxHiddenLayers) return false;
    for (int i = 1; i <= kMaxHiddenLayers; ++i) {
        const int g = genes[static_cast<std::size_t>(i)];
        if (i <= L && (g < 1 || g > kMaxLayerWidth)) return false;
        if (i > L && g != 0) return false;
    }
    return true;
}

void Chromosome::validate() const {
    if (!is_valid()) throw InvalidChromosomeError("invalid chromosome [" + to_string() + "]");
}

std::string Chromosome::to_string() const {
    std::string out;
    for (std::size_t i = 0; i < genes.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(genes[i]);
    }
    return out;
}

Chromosome Chromosome::parse(const std::string& text) {
    Chromosome c;
    std::stringstream ss(text);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ',')) {
        if (i >= kChromosomeGenes) throw InvalidChromosomeError("chromosome has more than 9 genes");
        try {
            std::size_t pos = 0;
            c.genes[i] = std::stoi(item, &pos);
            if (pos != item.size()) throw InvalidChromosomeError("bad gene '" + item + "'");
        } catch (const std::logic_error&) {
            throw InvalidChromosomeError("bad gene '" + item + "'");
        }
        ++i;
    }
    c.validate();
    return c;
}

Chromosome Chromosome::random(nn::Rng& rng) {
    Chromosome c;
    c.genes[0] = std::uniform_int_distribution<int>(1, kMaxHiddenLayers)(rng);
    for (int i = 1; i <= c.genes[0]; ++i) c.genes[static_cast<std::size_t>(i)] = random_width(rng);
    return c;
}

std::vector<std::size_t> decode_chromosome(const Chromosome& c) {
    c.validate();
    std::vector<std::size_t> widths;
    for (int i = 1; i <= c.layer_count(); ++i) widths.push_back(static_cast<std::size_t>(c.genes[static_cast<std::size_t>(i)]));
    return widths;
}

// ---------------------------------------------------------------- GA operators

void GAConfig::validate() const {
    if (population_size < 1) throw ConfigError("population_size must be at least 1");
    if (generations < 1) throw ConfigError("generations must be at least 1");
    if (parents_per_generation < 1 || parents_per_generation > population_size)
        throw ConfigError("parents_per_generation must lie in [1, population_size]");
    for (double r : {layer_gene_mutation_rate, neuron_gene_mutation_rate, immigrant_probability})
        if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("GA rates must lie in [0,1]");
}

nlohmann::json GAConfig::to_json() const {
    return {{"population_size", population_size},
            {"generations", generations},
            {"parents_per_generation", parents_per_generation},
            {"layer_gene_mutation_rate", layer_gene_mutation_rate},
            {"neuron_gene_mutation_rate", neuron_gene_mutation_rate},
            {"immigrant_probability", immigrant_probability},
            {"seed", seed}};
}

double fitness(double val_top1_percent) { return std::exp(val_top1_percent / 2.5); }

std::vector<std::size_t> select_parents(std::span<const double> fitnesses, std::size_t n, nn::Rng& rng) {
    if (fitnesses.empty()) throw SelectionError("cannot select from an empty population");
    double total = 0.0;
    for (double f : fitnesses) {
        if (!(f >= 0.0) || !std::isfinite(f)) throw SelectionError("fitness values must be finite and non-negative");
        total += f;
    }
    if (!(total > 0.0) || !std::isfinite(total)) throw SelectionError("total fitness is zero");
    std::vector<double> cumulative(fitnesses.size());
    std::partial_sum(fitnesses.begin(), fitnesses.end(), cumulative.begin());
    std::uniform_real_distribution<double> u(0.0, total);
    std::vector<std::size_t> out;
    out.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double r = u(rng);
        auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
        auto idx = static_cast<std::size_t>(it - cumulative.begin());
        idx = std::min(idx, fitnesses.size() - 1);
        // r can only land in a zero-width bucket through rounding; step to a member that has mass.
        while (fitnesses[idx] == 0.0 && idx > 0) --idx;
        out.push_back(idx);
    }
    return out;
}

Chromosome uniform_crossover(const Chromosome& p1, const Chromosome& p2, nn::Rng& rng) {
    std::bernoulli_distribution coin(0.5);
    Chromosome child;
    child.genes[0] = coin(rng) ? p1.genes[0] : p2.genes[0];
    for (int i = 1; i <= child.genes[0]; ++i) {
        const auto k = static_cast<std::size_t>(i);
        const int a = p1.genes[k];
        const int b = p2.genes[k];
        if (a != 0 && b != 0)
            child.genes[k] = coin(rng) ? a : b;
        else
            child.genes[k] = a != 0 ? a : b;
    }
    return child;
}

Chromosome set_layer_count(Chromosome c, int layers, nn::Rng& rng) {
    if (layers < 1 || layers > kMaxHiddenLayers) throw InvalidChromosomeError("layer count out of range");
    const int old = c.genes[0];
    for (int i = old + 1; i <= layers; ++i) c.genes[static_cast<std::size_t>(i)] = random_width(rng);
    for (int i = layers + 1; i <= kMaxHiddenLayers; ++i) c.genes[static_cast<std::size_t>(i)] = 0;
    c.genes[0] = layers;
    return c;
}

Chromosome mutate(const Chromosome& c, const GAConfig& cfg, nn::Rng& rng, bool is_elite) {
    if (is_elite) return c;
    Chromosome out = c;
    if (cfg.layer_gene_mutation_rate > 0.0 && uniform01(rng) < cfg.layer_gene_mutation_rate)
        out = set_layer_count(out, std::uniform_int_distribution<int>(1, kMaxHiddenLayers)(rng), rng);
    if (cfg.neuron_gene_mutation_rate > 0.0)
        for (int i = 1; i <= out.genes[0]; ++i)
            if (uniform01(rng) < cfg.neuron_gene_mutation_rate) out.genes[static_cast<std::size_t>(i)] = random_width(rng);
    return out;
}

nlohmann::json GenerationRecord::to_json() const {
    return {{"generation", generation},
            {"best_fitness", best_fitness},
            {"best_chromosome", best_chromosome.genes},
            {"population_mean_fitness", population_mean_fitness}};
}

GAResult run_ga(const FitnessFn& fitness_fn, const GAConfig& cfg, std::ostream* log) {
    cfg.validate();
    nn::Rng rng(cfg.seed);
    const std::size_t n = cfg.population_size;

    std::vector<Chromosome> pop(n);
    for (auto& c : pop) c = Chromosome::random(rng);
    std::vector<double> fit(n);
    for (std::size_t i = 0; i < n; ++i) fit[i] = fitness_fn(pop[i], eval_seed_for(cfg.seed, 0, i));

    GAResult result;
    auto record = [&](std::size_t generation) {
        const auto best = static_cast<std::size_t>(std::max_element(fit.begin(), fit.end()) - fit.begin());
        GenerationRecord r{generation, fit[best], pop[best],
                           std::accumulate(fit.begin(), fit.end(), 0.0) / static_cast<double>(n)};
        if (log) *log << r.to_json().dump() << '\n' << std::flush;
        result.history.push_back(r);
    };
    record(0);

    for (std::size_t g = 1; g < cfg.generations; ++g) {
        const auto elite = static_cast<std::size_t>(std::max_element(fit.begin(), fit.end()) - fit.begin());
        std::vector<Chromosome> next{pop[elite]};
        std::vector<double> next_fit{fit[elite]};
        const auto parents = select_parents(fit, cfg.parents_per_generation, rng);
        std::uniform_int_distribution<std::size_t> pick(0, parents.size() - 1);
        while (next.size() < n) {
            const auto& a = pop[parents[pick(rng)]];
            const auto& b = pop[parents[pick(rng)]];
            next.push_back(mutate(uniform_crossover(a, b, rng), cfg, rng, false));
        }
        next_fit.resize(n);
        for (std::size_t i = 1; i < n; ++i) next_fit[i] = fitness_fn(next[i], eval_seed_for(cfg.seed, g, i));

        if (n > 1 && uniform01(rng) < cfg.immigrant_probability) {
            const auto worst = static_cast<std::size_t>(
                std::min_element(next_fit.begin() + 1, next_fit.end()) - next_fit.begin());
            next[worst] = Chromosome::random(rng);
            next_fit[worst] = fitness_fn(next[worst], eval_seed_for(cfg.seed, g, n + worst));
        }
        pop = std::move(next);
        fit = std::move(next_fit);
        record(g);
    }

    const auto best = static_cast<std::size_t>(std::max_element(fit.begin(), fit.end()) - fit.begin());
    result.best = pop[best];
    result.best_fitness = fit[best];
    return result;
}

// ---------------------------------------------------------------- EnsembleHead

template <typename S>
EnsembleHead<S>::EnsembleHead(std::size_t num_classes, const std::vector<std::size_t>& hidden)
    : num_classes_(num_classes), hidden_(hidden) {
    if (num_classes < 2) throw ConfigError("ensemble head needs at least 2 classes");
    std::size_t in = 2 * num_classes;
    for (std::size_t l = 0; l < hidden.size(); ++l) {
        if (hidden[l] == 0) throw ConfigError("ensemble hidden layer of width 0");
        layers_.emplace_back("ensemble.dense" + std::to_string(l), in, hidden[l]);
        in = hidden[l];
    }
    layers_.emplace_back("ensemble.output", in, num_classes);
}

template <typename S>
void EnsembleHead<S>::init(std::uint64_t seed) {
    nn::Rng rng(seed);
    for (auto& l : layers_) l.init(rng);
}

template <typename S>
nn::RowVec<S> EnsembleHead<S>::logits(const nn::RowVec<S>& input, Cache* cache) const {
    if (static_cast<std::size_t>(input.size()) != 2 * num_classes_)
        throw ConfigError("ensemble head expects " + std::to_string(2 * num_classes_) + " inputs");
    nn::Mat<S> x = input;
    if (cache) {
        cache->inputs.assign(layers_.size(), {});
        cache->pre_activation.assign(layers_.size() - 1, {});
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        if (cache) cache->inputs[l] = x;
        nn::Mat<S> z = layers_[l].forward(x);
        if (l + 1 < layers_.size()) {
            x = z.cwiseMax(S(0));
            if (cache) cache->pre_activation[l] = std::move(z);
        } else {
            x = std::move(z);
        }
    }
    return x.row(0);
}

template <typename S>
void EnsembleHead<S>::backward(const Cache& cache, const nn::RowVec<S>& dlogits) {
    nn::Mat<S> d = dlogits;
    for (std::size_t l = layers_.size(); l-- > 0;) {
        nn::Mat<S> dx = layers_[l].backward(cache.inputs[l], d);
        if (l > 0) d = (dx.array() * (cache.pre_activation[l - 1].array() > S(0)).template cast<S>()).matrix();
    }
}

template <typename S>
nn::ParamList<S> EnsembleHead<S>::parameters() {
    nn::ParamList<S> out;
    for (auto& l : layers_) l.collect(out);
    return out;
}

template <typename S>
std::vector<const nn::Param<S>*> EnsembleHead<S>::parameters() const {
    auto list = const_cast<EnsembleHead<S>*>(this)->parameters();
    return {list.begin(), list.end()};
}

template <typename S>
void EnsembleHead<S>::zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
}

template class EnsembleHead<float>;
template class EnsembleHead<double>;

std::vector<double> ensemble_forward(std::span<const double> probs_early, std::span<const double> probs_late,
                                     const EnsembleHead<float>& head) {
    if (probs_early.size() != head.num_classes() || probs_late.size() != head.num_classes())
        throw ConfigError("ensemble inputs do not match the head's class count");
    const auto p = softmax<float>(head.logits(to_row<float>(probs_early, probs_late)));
    return {p.data(), p.data() + p.size()};
}

// ---------------------------------------------------------------- ensemble training

void EnsembleTrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("ensemble learning_rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("ensemble weight_decay must be non-negative");
    if (epochs < 1) throw ConfigError("ensemble epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("ensemble batch_size must be at least 1");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("label_smoothing must lie in [0,1)");
}

nlohmann::json EnsembleTrainConfig::to_json() const {
    return {{"learning_rate", learning_rate}, {"weight_decay", weight_decay}, {"epochs", epochs},
            {"batch_size", batch_size},       {"label_smoothing", label_smoothing},
            {"class_loss_weight", class_weight}, {"seed", seed}, {"sequence_length", sequence_length},
            {"eval_seed", eval_seed}};
}

CachedOutputs cache_base_outputs(const FusionModel<float>& early, const FusionModel<float>& late,
                                 std::span<const FeatureSequence* const> records, std::size_t sequence_length,
                                 std::uint64_t eval_seed) {
    CachedOutputs out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& rec = *records[i];
        if (!rec.label_id) throw ArgumentError("ensemble training record without a label");
        nn::Rng rng(record_seed(eval_seed, i));
        const auto batch = assemble_streams(rec, sequence_length, rng);
        const auto pe = early.forward(batch).class_probs;
        const auto pl = late.forward(batch).class_probs;
        out.early.emplace_back(pe.data(), pe.data() + pe.size());
        out.late.emplace_back(pl.data(), pl.data() + pl.size());
        out.labels.push_back(*rec.label_id);
    }
    return out;
}

EnsembleCheckpoint train_ensemble(const CachedOutputs& train, const CachedOutputs& val, const Chromosome& chromosome,
                                  std::size_t num_classes, const EnsembleTrainConfig& cfg) {
    cfg.validate();
    if (train.labels.empty()) throw ConfigError("training split is empty");
    if (val.labels.empty()) throw ConfigError("validation split is empty");
    EnsembleHead<float> head(num_classes, decode_chromosome(chromosome));
    head.init(mix(cfg.seed ^ 0x3));
    Adamax<float> opt(head.parameters(), {cfg.learning_rate, cfg.weight_decay});
    nn::Rng rng(mix(cfg.seed ^ 0x4));

    std::vector<std::vector<double>> targets(num_classes);
    for (std::size_t k = 0; k < num_classes; ++k) targets[k] = label_smooth(one_hot(num_classes, k), cfg.label_smoothing);
    std::vector<nn::RowVec<float>> train_inputs, val_inputs;
    for (std::size_t i = 0; i < train.labels.size(); ++i) train_inputs.push_back(to_row<float>(train.early[i], train.late[i]));
    for (std::size_t i = 0; i < val.labels.size(); ++i) val_inputs.push_back(to_row<float>(val.early[i], val.late[i]));

    std::vector<std::size_t> order(train.labels.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::optional<EnsembleCheckpoint> best;
    EnsembleHead<float>::Cache cache;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            head.zero_grad();
            for (std::size_t i = start; i < end; ++i) {
                const auto idx = order[i];
                const auto logits = head.logits(train_inputs[idx], &cache);
                const auto g = class_loss_and_gradient<float>(logits, softmax<float>(logits),
                                                              targets[train.labels[idx]], cfg.class_weight);
                if (!std::isfinite(g.loss)) throw TrainingDivergenceError("non-finite ensemble loss");
                head.backward(cache, g.dlogits);
            }
            opt.step(1.0 / static_cast<double>(end - start));
        }
        std::vector<std::vector<double>> probs;
        for (const auto& in : val_inputs) {
            const auto p = softmax<float>(head.logits(in));
            probs.emplace_back(p.data(), p.data() + p.size());
        }
        const double top1 = topk_accuracy(probs, val.labels, 1);
        const double top5 = topk_accuracy(probs, val.labels, 5);
        const double nll = mean_nll(probs, val.labels);
        if (!best || improves(top1, nll, best->val_top1, best->val_nll))
            best = EnsembleCheckpoint{head, chromosome, epoch, top1, top5, nll};
    }
    return std::move(*best);
}

EnsembleCheckpoint train_ensemble(const FusionModel<float>& early, const FusionModel<float>& late,
                                  const Chromosome& chromosome, const Dataset& data, const EnsembleTrainConfig& cfg) {
    if (early.config().num_classes != data.num_classes() || late.config().num_classes != data.num_classes())
        throw ConfigError("base models and dataset disagree on the class count");
    const auto train = cache_base_outputs(early, late, data.split(Split::Train), cfg.sequence_length, cfg.eval_seed);
    const auto val = cache_base_outputs(early, late, data.split(Split::Val), cfg.sequence_length, cfg.eval_seed);
    return train_ensemble(train, val, chromosome, data.num_classes(), cfg);
}

void save_ensemble(const EnsembleCheckpoint& ckpt, const std::filesystem::path& path) {
    CheckpointFile file;
    file.config = {{"kind", "ensemble"},
                   {"num_classes", ckpt.head.num_classes()},
                   {"chromosome", ckpt.chromosome.genes}};
    file.meta = {{"epoch", ckpt.epoch}, {"val_top1", ckpt.val_top1}, {"val_top5", ckpt.val_top5}, {"val_nll", ckpt.val_nll}};
    file.tensors = export_tensors<float>(ckpt.head.parameters());
    write_checkpoint_file(file, path);
}

EnsembleCheckpoint load_ensemble(const std::filesystem::path& path) {
    auto file = read_checkpoint_file(path);
    Chromosome c;
    std::size_t K = 0;
    try {
        if (file.config.at("kind").get<std::string>() != "ensemble")
            throw FormatError(path.string() + ": not an ensemble checkpoint");
        K = file.config.at("num_classes").get<std::size_t>();
        c.genes = file.config.at("chromosome").get<std::array<int, kChromosomeGenes>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": malformed ensemble header: " + e.what());
    }
    if (!c.is_valid()) throw FormatError(path.string() + ": invalid chromosome in header");
    EnsembleCheckpoint ckpt{EnsembleHead<float>(K, decode_chromosome(c)), c, 0, 0.0, 0.0};
    import_tensors<float>(file.tensors, ckpt.head.parameters());
    ckpt.epoch = file.meta.value("epoch", std::size_t{0});
    ckpt.val_top1 = file.meta.value("val_top1", 0.0);
    ckpt.val_nll = file.meta.value("val_nll", 0.0);
    ckpt.val_top5 = file.meta.value("val_top5", 0.0);
    return ckpt;
}

ProbabilityFn make_ensemble_fn(const FusionModel<float>& early, const FusionModel<float>& late,
                               const EnsembleHead<float>& head) {
    return [&early, &late, &head](const StreamBatch& batch) {
        const auto pe = early.forward(batch).class_probs;
        const auto pl = late.forward(batch).class_probs;
        const std::vector<double> a(pe.data(), pe.data() + pe.size());
        const std::vector<double> b(pl.data(), pl.data() + pl.size());
        return ensemble_forward(a, b, head);
    };
}

}  // namespace slr
