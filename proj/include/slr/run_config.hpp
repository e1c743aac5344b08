#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "slr/decoder.hpp"
#include "slr/ensemble_ga.hpp"
#include "slr/model.hpp"
#include "slr/train.hpp"

namespace slr {

// Everything a pipeline run needs besides file paths given on the command line.
// Every key is optional; unknown keys are a ConfigError naming the key.
//
// {
//   "seed": 0,
//   "data": "path/to/manifest.json",
//   "arch": "late",
//   "train":    {learning_rate, weight_decay, epochs, batch_size, label_smoothing,
//                class_loss_weight, embedding_loss_weight, streams: {A,B,C}, sequence_length, eval_seed},
//   "ga":       {population_size, generations, parents_per_generation, layer_gene_mutation_rate,
//                neuron_gene_mutation_rate, immigrant_probability, budget_epochs},
//   "ensemble": {learning_rate, weight_decay, epochs, batch_size, label_smoothing, class_loss_weight,
//                sequence_length, eval_seed, chromosome: "2,64,32"},
//   "decode":   {window, step, threshold, padding_seed}
// }
//
// "seed" feeds train, ga and ensemble alike.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string data;
    Architecture arch = Architecture::Late;
    TrainConfig train;
    GAConfig ga;
    std::size_t ga_budget_epochs = 10;
    EnsembleTrainConfig ensemble;
    Chromosome chromosome = Chromosome::parse("2,64,32");
    DecodeConfig decode;

    void set_seed(std::uint64_t s);
    void validate() const;
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::filesystem::path& path);  // ConfigError if the file is unreadable or not JSON
};

}  // namespace slr
