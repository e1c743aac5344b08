#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace slr {

// Indices of the k largest entries, ties broken by the lower index.
std::vector<std::size_t> topk_indices(std::span<const double> probs, std::size_t k);
bool in_topk(std::span<const double> probs, std::size_t label, std::size_t k);
double topk_accuracy(const std::vector<std::vector<double>>& probs, std::span<const std::uint32_t> labels,
                     std::size_t k);
// Mean -log p(label), clamped at 1e-12.
double mean_nll(const std::vector<std::vector<double>>& probs, std::span<const std::uint32_t> labels);

using ConfusionMatrix = std::vector<std::vector<std::size_t>>;  // [true][predicted]

ConfusionMatrix confusion_matrix(std::span<const std::uint32_t> predictions, std::span<const std::uint32_t> labels,
                                 std::size_t num_classes);

struct ErrorCounts {
    std::size_t insertions = 0;
    std::size_t deletions = 0;
    std::size_t substitutions = 0;

    std::size_t total() const { return insertions + deletions + substitutions; }
    bool operator==(const ErrorCounts&) const = default;
};

// Unit-cost Levenshtein alignment of hypothesis against reference. The backtrace
// prefers match, then substitution, then deletion, then insertion.
ErrorCounts edit_errors(std::span<const std::uint32_t> reference, std::span<const std::uint32_t> hypothesis);
std::size_t edit_distance(std::span<const std::uint32_t> reference, std::span<const std::uint32_t> hypothesis);

struct SentenceDecode {
    std::vector<std::uint32_t> words;
    double mean_confidence = 0.0;
};

struct SentenceRow {
    std::size_t reference_words = 0;
    double mean_confidence = 0.0;
    ErrorCounts errors;
};

struct SentenceReport {
    std::vector<SentenceRow> rows;
    double average_confidence = 0.0;
    double average_total_errors = 0.0;

    nlohmann::json to_json() const;
    std::string to_text() const;
};

SentenceReport sentence_report(const std::vector<SentenceDecode>& decodes,
                               const std::vector<std::vector<std::uint32_t>>& references);

}  // namespace slr
