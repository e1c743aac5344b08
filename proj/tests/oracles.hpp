#pragma once
// Reference implementations used as test oracles. They avoid the library code paths
// they check: brute-force enumeration instead of DP, closed forms instead of loops, etc.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "slr/decoder.hpp"
#include "slr/ensemble_ga.hpp"
#include "slr/featurestore.hpp"
#include "slr/metrics.hpp"
#include "slr/model.hpp"
#include "slr/preprocess.hpp"

namespace oracle {

// ---- edit scripts ----
//
// Enumerates edit scripts from the end of both sequences, trying moves in the order
// match, substitute, delete, insert. The first script reaching the minimum cost is
// therefore the lexicographically preferred one. Branches that cannot beat the best
// cost found so far (cost + remaining length difference) are cut.
struct ScriptSearch {
    const std::vector<std::uint32_t>& ref;
    const std::vector<std::uint32_t>& hyp;
    std::size_t best_cost = std::numeric_limits<std::size_t>::max();
    slr::ErrorCounts best{};
    slr::ErrorCounts cur{};

    void run(std::size_t i, std::size_t j) {
        const std::size_t cost = cur.total();
        const std::size_t gap = i > j ? i - j : j - i;
        if (cost + gap >= best_cost) return;
        if (i == 0 && j == 0) {
            best_cost = cost;
            best = cur;
            return;
        }
        if (i > 0 && j > 0 && ref[i - 1] == hyp[j - 1]) run(i - 1, j - 1);
        if (i > 0 && j > 0 && ref[i - 1] != hyp[j - 1]) {
            ++cur.substitutions;
            run(i - 1, j - 1);
            --cur.substitutions;
        }
        if (i > 0) {
            ++cur.deletions;
            run(i - 1, j);
            --cur.deletions;
        }
        if (j > 0) {
            ++cur.insertions;
            run(i, j - 1);
            --cur.insertions;
        }
    }
};

inline slr::ErrorCounts edit_script_search(const std::vector<std::uint32_t>& ref,
                                           const std::vector<std::uint32_t>& hyp) {
    ScriptSearch s{ref, hyp};
    s.run(ref.size(), hyp.size());
    return s.best;
}

// All sequences over {0..alphabet-1} with length <= max_len.
inline std::vector<std::vector<std::uint32_t>> all_sequences(std::uint32_t alphabet, std::size_t max_len) {
    std::vector<std::vector<std::uint32_t>> out{{}};
    std::size_t from = 0;
    for (std::size_t len = 1; len <= max_len; ++len) {
        const std::size_t to = out.size();
        for (std::size_t k = from; k < to; ++k)
            for (std::uint32_t a = 0; a < alphabet; ++a) {
                auto s = out[k];
                s.push_back(a);
                out.push_back(std::move(s));
            }
        from = to;
    }
    return out;
}

// ---- dedup traces, written out by hand ----

struct DedupCase {
    std::string name;
    std::vector<std::optional<std::uint32_t>> stream;  // nullopt = null window
    std::vector<std::uint32_t> expected;
};

inline std::vector<DedupCase> dedup_cases() {
    const std::optional<std::uint32_t> N;
    const std::uint32_t A = 0, B = 1, C = 2;
    return {
        {"repeat then new word", {A, A, N, B}, {A, B}},
        {"null does not reset", {A, N, A}, {A}},
        {"only nulls", {N, N}, {}},
        {"empty", {}, {}},
        {"long null run does not reset", {A, N, N, N, N, N, A}, {A}},
        {"alternating", {A, B, A, B}, {A, B, A, B}},
        {"alternating through nulls", {A, N, B, N, A}, {A, B, A}},
        {"leading nulls", {N, N, C, C}, {C}},
        {"three words with repeats", {A, A, B, B, B, C, C}, {A, B, C}},
        {"return to earlier word", {A, B, B, N, A, A}, {A, B, A}},
        {"single window", {B}, {B}},
        {"trailing nulls", {C, N, N}, {C}},
        {"nulls between every window", {A, N, A, N, B, N, B, N, C}, {A, B, C}},
    };
}

inline std::vector<slr::WindowPrediction> to_predictions(const std::vector<std::optional<std::uint32_t>>& s) {
    std::vector<slr::WindowPrediction> out;
    for (std::size_t i = 0; i < s.size(); ++i) out.push_back({i * 5, s[i], s[i] ? 0.5 : 0.1});
    return out;
}

// ---- centroid classifier over time-averaged frames ----

inline std::vector<double> mean_frame(const slr::FeatureSequence& s) {
    std::vector<double> m(slr::kFrameDim, 0.0);
    for (const auto& f : s.frames) {
        std::size_t d = 0;
        for (float v : f.hand_shape) m[d++] += v;
        for (float v : f.arm_points) m[d++] += v;
        for (float v : f.lip_shape) m[d++] += v;
    }
    for (auto& v : m) v /= static_cast<double>(s.frames.size());
    return m;
}

// Fits class centroids on `fit` and returns the accuracy on `score`.
inline double centroid_accuracy(const std::vector<const slr::FeatureSequence*>& fit,
                                const std::vector<const slr::FeatureSequence*>& score, std::size_t K) {
    std::vector<std::vector<double>> c(K, std::vector<double>(slr::kFrameDim, 0.0));
    std::vector<double> n(K, 0.0);
    for (const auto* r : fit) {
        const auto m = mean_frame(*r);
        for (std::size_t d = 0; d < m.size(); ++d) c[*r->label_id][d] += m[d];
        n[*r->label_id] += 1.0;
    }
    for (std::size_t k = 0; k < K; ++k)
        for (auto& v : c[k]) v /= std::max(n[k], 1.0);
    std::size_t hits = 0;
    for (const auto* r : score) {
        const auto m = mean_frame(*r);
        std::size_t arg = 0;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K; ++k) {
            double dist = 0.0;
            for (std::size_t d = 0; d < m.size(); ++d) dist += (m[d] - c[k][d]) * (m[d] - c[k][d]);
            if (dist < best) {
                best = dist;
                arg = k;
            }
        }
        if (arg == *r->label_id) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(score.size());
}

// ---- model helpers ----

// T=4-sized toy configurations: d_model 12, 2 heads, 3 classes, 5-d embedding, no dropout.
inline slr::ModelConfig tiny_config(slr::Architecture arch) {
    slr::ModelConfig c;
    c.arch = arch;
    c.num_classes = 3;
    c.embedding_dim = 5;
    c.stream_a = {6, 2, 8, 1, 0.0};
    c.stream_b = {4, 2, 6, 1, 0.0};
    c.stream_c = {2, 2, 4, 1, 0.0};
    c.fused = {12, 2, 10, 1, 0.0};
    c.early = {12, 2, 10, 1, 0.0};
    return c;
}

// Random batch of length T whose first `valid` rows are real.
inline slr::StreamBatch random_batch(std::size_t T, std::size_t valid, std::mt19937_64& rng) {
    std::normal_distribution<float> g(0.0f, 1.0f);
    slr::StreamBatch b;
    b.stream_a = slr::FeatureMatrix::Zero(T, slr::kStreamADim);
    b.stream_b = slr::FeatureMatrix::Zero(T, slr::kStreamBDim);
    b.stream_c = slr::FeatureMatrix::Zero(T, slr::kStreamCDim);
    b.mask.assign(T, false);
    for (std::size_t t = 0; t < valid; ++t) {
        b.mask[t] = true;
        for (Eigen::Index d = 0; d < b.stream_a.cols(); ++d) b.stream_a(t, d) = g(rng);
        for (Eigen::Index d = 0; d < b.stream_b.cols(); ++d) b.stream_b(t, d) = g(rng);
        for (Eigen::Index d = 0; d < b.stream_c.cols(); ++d) b.stream_c(t, d) = g(rng);
    }
    return b;
}

// Same content with the masked tail extended to T frames.
inline slr::StreamBatch extend_padding(const slr::StreamBatch& b, std::size_t T) {
    slr::StreamBatch out;
    out.stream_a = slr::FeatureMatrix::Zero(T, slr::kStreamADim);
    out.stream_b = slr::FeatureMatrix::Zero(T, slr::kStreamBDim);
    out.stream_c = slr::FeatureMatrix::Zero(T, slr::kStreamCDim);
    const auto n = static_cast<Eigen::Index>(b.length());
    out.stream_a.topRows(n) = b.stream_a;
    out.stream_b.topRows(n) = b.stream_b;
    out.stream_c.topRows(n) = b.stream_c;
    out.mask = b.mask;
    out.mask.resize(T, false);
    return out;
}

template <typename S>
double max_abs_diff(const slr::nn::RowVec<S>& a, const slr::nn::RowVec<S>& b) {
    return static_cast<double>((a - b).cwiseAbs().maxCoeff());
}

// Max-norm change of (class_probs, embedding) when the masked padding of random batches
// grows. Runs `count` batches.
inline double masking_invariance(const slr::FusionModel<float>& model, std::size_t count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const auto valid = std::uniform_int_distribution<std::size_t>(1, 40)(rng);
        const auto T1 = valid + std::uniform_int_distribution<std::size_t>(0, 10)(rng);
        const auto T2 = T1 + std::uniform_int_distribution<std::size_t>(1, 20)(rng);
        const auto b1 = random_batch(T1, valid, rng);
        const auto b2 = extend_padding(b1, T2);
        const auto o1 = model.forward(b1);
        const auto o2 = model.forward(b2);
        worst = std::max({worst, max_abs_diff(o1.class_probs, o2.class_probs),
                          max_abs_diff(o1.embedding, o2.embedding)});
    }
    return worst;
}

// ---- gradient check ----

struct GradCheck {
    double worst = 0.0;
    std::size_t coordinates = 0;
};

inline double rel_error(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-4}); }

template <typename S>
double sample_loss(const slr::FusionModel<S>& m, const slr::StreamBatch& b, const std::vector<double>& target,
                   const std::vector<float>& emb) {
    return slr::loss_and_gradient<S>(m.forward(b), target, emb, {}).loss;
}

// Analytic gradients of `model` (scalar S) against central differences on a double copy.
// Picks `n` coordinates: a random tensor, then a random entry in it.
template <typename S>
GradCheck gradient_check(slr::FusionModel<S>& model, const slr::StreamBatch& batch, std::size_t n,
                         std::uint64_t seed, double h) {
    std::mt19937_64 rng(seed);
    const std::size_t K = model.config().num_classes;
    std::vector<double> target = slr::label_smooth(slr::one_hot(K, 1), 0.15);
    std::vector<float> emb(model.config().embedding_dim);
    std::normal_distribution<float> g(0.0f, 1.0f);
    for (auto& v : emb) v = g(rng);

    typename slr::FusionModel<S>::Cache cache;
    model.zero_grad();
    const auto out = model.forward(batch, &cache);
    const auto lg = slr::loss_and_gradient<S>(out, target, emb, {});
    model.backward(cache, lg.dlogits, lg.dembedding);

    auto ref = slr::convert_model<double>(model);
    auto analytic = model.parameters();
    auto numeric = ref.parameters();
    GradCheck r;
    for (std::size_t k = 0; k < n; ++k) {
        const auto p = std::uniform_int_distribution<std::size_t>(0, analytic.size() - 1)(rng);
        const auto size = static_cast<std::size_t>(analytic[p]->value.size());
        const auto idx = static_cast<Eigen::Index>(std::uniform_int_distribution<std::size_t>(0, size - 1)(rng));
        double& w = numeric[p]->value.data()[idx];
        const double saved = w;
        w = saved + h;
        const double up = sample_loss<double>(ref, batch, target, emb);
        w = saved - h;
        const double down = sample_loss<double>(ref, batch, target, emb);
        w = saved;
        const double fd = (up - down) / (2.0 * h);
        const double an = static_cast<double>(analytic[p]->grad.data()[idx]);
        r.worst = std::max(r.worst, rel_error(an, fd));
        ++r.coordinates;
    }
    return r;
}

// ---- GA ----

// 100 - mean |gene - target| over all nine genes.
inline double mock_fitness(const slr::Chromosome& c, const slr::Chromosome& target) {
    double sum = 0.0;
    for (std::size_t i = 0; i < c.genes.size(); ++i) sum += std::abs(c.genes[i] - target.genes[i]);
    return 100.0 - sum / static_cast<double>(c.genes.size());
}

inline double random_search_best(const slr::Chromosome& target, std::size_t samples, std::uint64_t seed) {
    slr::nn::Rng rng(seed);
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < samples; ++i) best = std::max(best, mock_fitness(slr::Chromosome::random(rng), target));
    return best;
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace oracle
