#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "slr/featurestore.hpp"
#include "slr/layers.hpp"
#include "slr/model.hpp"
#include "slr/train.hpp"

namespace slr {

inline constexpr int kMaxHiddenLayers = 8;
inline constexpr int kMaxLayerWidth = 756;
inline constexpr std::size_t kChromosomeGenes = 9;

// Gene 0 is the hidden layer count L in [1,8]; genes 1..L are widths in [1,756]; the rest are zero.
struct Chromosome {
    std::array<int, kChromosomeGenes> genes{};

    int layer_count() const { return genes[0]; }
    bool is_valid() const;
    void validate() const;  // throws InvalidChromosomeError
    std::string to_string() const;
    static Chromosome parse(const std::string& text);  // "6,310,693,465,638,513,406" (trailing zeros optional)
    static Chromosome random(nn::Rng& rng);
    bool operator==(const Chromosome&) const = default;
};

std::vector<std::size_t> decode_chromosome(const Chromosome& c);

struct GAConfig {
    std::size_t population_size = 20;
    std::size_t generations = 30;
    std::size_t parents_per_generation = 10;
    double layer_gene_mutation_rate = 0.005;
    double neuron_gene_mutation_rate = 0.001;
    double immigrant_probability = 0.08;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
};

// exp(acc / 2.5) with the validation accuracy in percent.
double fitness(double val_top1_percent);

// n roulette draws with replacement, P(i) = f_i / sum f. Returns population indices.
std::vector<std::size_t> select_parents(std::span<const double> fitnesses, std::size_t n, nn::Rng& rng);

Chromosome uniform_crossover(const Chromosome& p1, const Chromosome& p2, nn::Rng& rng);

// Changes the layer count, drawing widths for newly active layers and zeroing dropped ones.
Chromosome set_layer_count(Chromosome c, int layers, nn::Rng& rng);

Chromosome mutate(const Chromosome& c, const GAConfig& cfg, nn::Rng& rng, bool is_elite);

struct GenerationRecord {
    std::size_t generation = 0;
    double best_fitness = 0.0;
    Chromosome best_chromosome;
    double population_mean_fitness = 0.0;

    nlohmann::json to_json() const;
};

struct GAResult {
    Chromosome best;
    double best_fitness = 0.0;
    std::vector<GenerationRecord> history;
};

// Fitness of a chromosome; eval_seed is derived from (seed, generation, slot) so results
// do not depend on evaluation order.
using FitnessFn = std::function<double(const Chromosome&, std::uint64_t eval_seed)>;

// Generational loop: evaluate, keep the elite unmutated, roulette-select parents, fill the
// rest with mutated crossover children, then with some probability replace the worst
// non-elite member by a random immigrant. Generation 0 is the random initial population.
GAResult run_ga(const FitnessFn& fitness_fn, const GAConfig& cfg, std::ostream* log = nullptr);

// Dense stack over the concatenated class outputs of the two base models:
// 2K -> hidden widths (ReLU) -> K logits.
template <typename S>
class EnsembleHead {
public:
    struct Cache {
        std::vector<nn::Mat<S>> inputs;          // input of every dense layer
        std::vector<nn::Mat<S>> pre_activation;  // hidden layers only
    };

    EnsembleHead(std::size_t num_classes, const std::vector<std::size_t>& hidden);

    void init(std::uint64_t seed);
    nn::RowVec<S> logits(const nn::RowVec<S>& input, Cache* cache = nullptr) const;
    void backward(const Cache& cache, const nn::RowVec<S>& dlogits);

    nn::ParamList<S> parameters();
    std::vector<const nn::Param<S>*> parameters() const;
    void zero_grad();

    std::size_t num_classes() const { return num_classes_; }
    const std::vector<std::size_t>& hidden() const { return hidden_; }
    std::vector<nn::Linear<S>>& layers() { return layers_; }

private:
    std::size_t num_classes_;
    std::vector<std::size_t> hidden_;
    std::vector<nn::Linear<S>> layers_;
};

// Concatenates both probability vectors, runs the head and returns softmax probabilities.
std::vector<double> ensemble_forward(std::span<const double> probs_early, std::span<const double> probs_late,
                                     const EnsembleHead<float>& head);

struct EnsembleTrainConfig {
    double learning_rate = 0.0015;
    double weight_decay = 0.0004;
    std::size_t epochs = 100;
    std::size_t batch_size = 32;
    double label_smoothing = 0.15;
    double class_weight = 1.8;
    std::uint64_t seed = 0;
    std::size_t sequence_length = kDefaultSequenceLength;
    std::uint64_t eval_seed = 7;

    void validate() const;
    nlohmann::json to_json() const;
};

struct EnsembleCheckpoint {
    EnsembleHead<float> head;
    Chromosome chromosome;
    std::size_t epoch = 0;
    double val_top1 = 0.0;
    double val_top5 = 0.0;
    double val_nll = 0.0;
};

// Base-model class probabilities for every record of a split, with fixed-seed length normalization.
struct CachedOutputs {
    std::vector<std::vector<double>> early, late;
    std::vector<std::uint32_t> labels;
};

CachedOutputs cache_base_outputs(const FusionModel<float>& early, const FusionModel<float>& late,
                                 std::span<const FeatureSequence* const> records, std::size_t sequence_length,
                                 std::uint64_t eval_seed);

// Trains only the head; the base models are read-only. Epoch selection as in train_model.
EnsembleCheckpoint train_ensemble(const FusionModel<float>& early, const FusionModel<float>& late,
                                  const Chromosome& chromosome, const Dataset& data, const EnsembleTrainConfig& cfg);

// Same, on precomputed base outputs (used by the GA fitness loop).
EnsembleCheckpoint train_ensemble(const CachedOutputs& train, const CachedOutputs& val, const Chromosome& chromosome,
                                  std::size_t num_classes, const EnsembleTrainConfig& cfg);

void save_ensemble(const EnsembleCheckpoint& ckpt, const std::filesystem::path& path);
EnsembleCheckpoint load_ensemble(const std::filesystem::path& path);

// Full recognizer: both base models and the head. All three must outlive the function.
ProbabilityFn make_ensemble_fn(const FusionModel<float>& early, const FusionModel<float>& late,
                               const EnsembleHead<float>& head);

}  // namespace slr
