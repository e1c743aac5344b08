#include "slr/decoder.hpp"

#include <algorithm>

#include "slr/errors.hpp"

namespace slr {

void DecodeConfig::validate() const {
    if (window < 1) throw ConfigError("decode window must be at least 1 frame");
    if (step < 1) throw ConfigError("decode step must be at least 1 frame");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("decode threshold must lie in (0,1)");
}

std::vector<std::size_t> windows(std::size_t seq_len, const DecodeConfig& cfg) {
    cfg.validate();
    if (seq_len < 1) throw ArgumentError("cannot window an empty sequence");
    if (seq_len < cfg.window) return {0};
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s + cfg.window <= seq_len; s += cfg.step) starts.push_back(s);
    return starts;
}

WindowPrediction threshold_prediction(std::span<const double> probs, double threshold, std::size_t start) {
    if (probs.empty()) throw ArgumentError("empty probability vector");
    const auto best = std::max_element(probs.begin(), probs.end());  // first maximum on ties
    WindowPrediction p;
    p.start = start;
    p.confidence = *best;
    if (*best > threshold) p.word = static_cast<std::uint32_t>(best - probs.begin());
    return p;
}

WindowPrediction classify_window(const ProbabilityFn& model, const FeatureSequence& seq, std::size_t start,
                                 const DecodeConfig& cfg) {
    if (start >= seq.length()) throw ArgumentError("window starts past the end of the sequence");
    FeatureSequence window;
    const auto end = std::min(seq.length(), start + cfg.window);
    window.frames.assign(seq.frames.begin() + static_cast<std::ptrdiff_t>(start),
                         seq.frames.begin() + static_cast<std::ptrdiff_t>(end));
    Rng rng(cfg.padding_seed);
    const auto batch = assemble_streams(window, cfg.window, rng);
    const auto probs = model(batch);
    return threshold_prediction(probs, cfg.threshold, start);
}

std::vector<AcceptedWord> accept_stream(std::span<const WindowPrediction> preds) {
    std::vector<AcceptedWord> out;
    std::optional<std::uint32_t> last;
    for (const auto& p : preds) {
        if (!p.word || p.word == last) continue;
        out.push_back({*p.word, p.confidence});
        last = p.word;
    }
    return out;
}

DecodeTrace decode(const ProbabilityFn& model, const FeatureSequence& seq, const DecodeConfig& cfg) {
    DecodeTrace trace;
    for (auto start : windows(seq.length(), cfg)) trace.windows.push_back(classify_window(model, seq, start, cfg));
    for (const auto& a : accept_stream(trace.windows)) {
        trace.words.push_back(a.word);
        trace.confidences.push_back(a.confidence);
    }
    if (!trace.confidences.empty()) {
        double sum = 0.0;
        for (double c : trace.confidences) sum += c;
        trace.mean_confidence = sum / static_cast<double>(trace.confidences.size());
    }
    return trace;
}

nlohmann::json DecodeTrace::to_json() const {
    nlohmann::json w = nlohmann::json::array();
    for (const auto& p : windows)
        w.push_back({{"start", p.start},
                     {"word", p.word ? nlohmann::json(*p.word) : nlohmann::json(nullptr)},
                     {"confidence", p.confidence}});
    nlohmann::json accepted = nlohmann::json::array();
    for (std::size_t i = 0; i < words.size(); ++i)
        accepted.push_back({{"word", words[i]}, {"confidence", confidences[i]}});
    return {{"windows", w}, {"accepted", accepted}, {"mean_confidence", mean_confidence}};
}

}  // namespace slr
