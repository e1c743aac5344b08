#include "slr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "slr/errors.hpp"

namespace slr {

std::vector<std::size_t> topk_indices(std::span<const double> probs, std::size_t k) {
    std::vector<std::size_t> idx(probs.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    k = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return probs[a] > probs[b] || (probs[a] == probs[b] && a < b); });
    idx.resize(k);
    return idx;
}

bool in_topk(std::span<const double> probs, std::size_t label, std::size_t k) {
    const auto top = topk_indices(probs, k);
    return std::find(top.begin(), top.end(), label) != top.end();
}

double topk_accuracy(const std::vector<std::vector<double>>& probs, std::span<const std::uint32_t> labels,
                     std::size_t k) {
    if (probs.empty()) throw ArgumentError("top-k accuracy of an empty set");
    if (probs.size() != labels.size()) throw ArgumentError("top-k: predictions and labels differ in length");
    if (k == 0) throw ArgumentError("top-k needs k >= 1");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < probs.size(); ++i)
        if (in_topk(probs[i], labels[i], k)) ++hits;
    return static_cast<double>(hits) / static_cast<double>(probs.size());
}

double mean_nll(const std::vector<std::vector<double>>& probs, std::span<const std::uint32_t> labels) {
    if (probs.empty()) throw ArgumentError("nll of an empty set");
    if (probs.size() != labels.size()) throw ArgumentError("nll: predictions and labels differ in length");
    double sum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (labels[i] >= probs[i].size()) throw ArgumentError("nll: label out of range");
        sum -= std::log(std::max(probs[i][labels[i]], 1e-12));
    }
    return sum / static_cast<double>(probs.size());
}

ConfusionMatrix confusion_matrix(std::span<const std::uint32_t> predictions, std::span<const std::uint32_t> labels,
                                 std::size_t num_classes) {
    if (predictions.size() != labels.size()) throw ArgumentError("confusion matrix: length mismatch");
    ConfusionMatrix m(num_classes, std::vector<std::size_t>(num_classes, 0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes || predictions[i] >= num_classes)
            throw ArgumentError("confusion matrix: class index out of range");
        ++m[labels[i]][predictions[i]];
    }
    return m;
}

namespace {

std::vector<std::vector<std::size_t>> distance_table(std::span<const std::uint32_t> ref,
                                                     std::span<const std::uint32_t> hyp) {
    const auto n = ref.size();
    const auto m = hyp.size();
    std::vector<std::vector<std::size_t>> d(n + 1, std::vector<std::size_t>(m + 1, 0));
    for (std::size_t i = 0; i <= n; ++i) d[i][0] = i;
    for (std::size_t j = 0; j <= m; ++j) d[0][j] = j;
    for (std::size_t i = 1; i <= n; ++i)
        for (std::size_t j = 1; j <= m; ++j)
            d[i][j] = std::min({d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1), d[i - 1][j] + 1, d[i][j - 1] + 1});
    return d;
}

}  // namespace

std::size_t edit_distance(std::span<const std::uint32_t> reference, std::span<const std::uint32_t> hypothesis) {
    return distance_table(reference, hypothesis)[reference.size()][hypothesis.size()];
}

ErrorCounts edit_errors(std::span<const std::uint32_t> reference, std::span<const std::uint32_t> hypothesis) {
    const auto d = distance_table(reference, hypothesis);
    ErrorCounts e;
    std::size_t i = reference.size();
    std::size_t j = hypothesis.size();
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && d[i][j] == d[i - 1][j - 1]) {
            --i;
            --j;
        } else if (i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1) {
            ++e.substitutions;
            --i;
            --j;
        } else if (i > 0 && d[i][j] == d[i - 1][j] + 1) {
            ++e.deletions;
            --i;
        } else {
            ++e.insertions;
            --j;
        }
    }
    return e;
}

SentenceReport sentence_report(const std::vector<SentenceDecode>& decodes,
                               const std::vector<std::vector<std::uint32_t>>& references) {
    if (decodes.size() != references.size()) throw ArgumentError("sentence report: length mismatch");
    SentenceReport r;
    for (std::size_t s = 0; s < decodes.size(); ++s) {
        SentenceRow row;
        row.reference_words = references[s].size();
        row.mean_confidence = decodes[s].mean_confidence;
        row.errors = edit_errors(references[s], decodes[s].words);
        r.average_confidence += row.mean_confidence;
        r.average_total_errors += static_cast<double>(row.errors.total());
        r.rows.push_back(row);
    }
    if (!r.rows.empty()) {
        r.average_confidence /= static_cast<double>(r.rows.size());
        r.average_total_errors /= static_cast<double>(r.rows.size());
    }
    return r;
}

nlohmann::json SentenceReport::to_json() const {
    nlohmann::json sentences = nlohmann::json::array();
    for (const auto& row : rows)
        sentences.push_back({{"words", row.reference_words},
                             {"mean_confidence", row.mean_confidence},
                             {"insertions", row.errors.insertions},
                             {"deletions", row.errors.deletions},
                             {"substitutions", row.errors.substitutions},
                             {"total_errors", row.errors.total()}});
    return {{"sentences", sentences},
            {"average_confidence", average_confidence},
            {"average_total_errors", average_total_errors}};
}

std::string SentenceReport::to_text() const {
    std::string out = "sentence  words  mean_conf  I  D  S  total\n";
    char line[128];
    for (std::size_t s = 0; s < rows.size(); ++s) {
        const auto& r = rows[s];
        std::snprintf(line, sizeof line, "%8zu  %5zu  %9.3f  %zu  %zu  %zu  %5zu\n", s + 1, r.reference_words,
                      r.mean_confidence, r.errors.insertions, r.errors.deletions, r.errors.substitutions,
                      r.errors.total());
        out += line;
    }
    std::snprintf(line, sizeof line, "average          %9.3f           %5.2f\n", average_confidence,
                  average_total_errors);
    out += line;
    return out;
}

}  // namespace slr
