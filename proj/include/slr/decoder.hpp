#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "slr/featurestore.hpp"
#include "slr/metrics.hpp"
#include "slr/model.hpp"

namespace slr {

struct DecodeConfig {
    std::size_t window = 40;
    std::size_t step = 5;
    double threshold = 0.2;
    std::uint64_t padding_seed = 0;  // only used for sequences shorter than one window

    void validate() const;
};

struct WindowPrediction {
    std::size_t start = 0;
    std::optional<std::uint32_t> word;  // nullopt is a "null" window
    double confidence = 0.0;            // max class probability
};

struct DecodeTrace {
    std::vector<WindowPrediction> windows;
    std::vector<std::uint32_t> words;
    std::vector<double> confidences;
    double mean_confidence = 0.0;

    nlohmann::json to_json() const;
    SentenceDecode summary() const { return {words, mean_confidence}; }
};

// Window start offsets. A sequence shorter than one window yields the single offset 0.
std::vector<std::size_t> windows(std::size_t seq_len, const DecodeConfig& cfg);

// Thresholds a probability vector: a word only when the max probability strictly exceeds the threshold.
WindowPrediction threshold_prediction(std::span<const double> probs, double threshold, std::size_t start = 0);

WindowPrediction classify_window(const ProbabilityFn& model, const FeatureSequence& seq, std::size_t start,
                                 const DecodeConfig& cfg);

struct AcceptedWord {
    std::uint32_t word;
    double confidence;
};

// Accepts a non-null word only if it differs from the last accepted one. Nulls never reset that memory.
std::vector<AcceptedWord> accept_stream(std::span<const WindowPrediction> preds);

DecodeTrace decode(const ProbabilityFn& model, const FeatureSequence& seq, const DecodeConfig& cfg);

}  // namespace slr
