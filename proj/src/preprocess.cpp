#include "slr/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "slr/errors.hpp"

namespace slr {

std::size_t StreamBatch::valid_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

void apply_toggles(StreamBatch& batch, const StreamToggles& toggles) {
    if (!toggles.a) batch.stream_a.setZero();
    if (!toggles.b) batch.stream_b.setZero();
    if (!toggles.c) batch.stream_c.setZero();
}

LengthNormalized normalize_length(const FeatureSequence& seq, std::size_t T, Rng& rng) {
    if (seq.frames.empty()) throw ArgumentError("cannot normalize an empty sequence");
    if (T == 0) throw ArgumentError("target length must be at least 1");
    LengthNormalized out;
    out.sequence.label_id = seq.label_id;
    out.sequence.signer_id = seq.signer_id;
    out.sequence.gloss = seq.gloss;
    const std::size_t n = seq.frames.size();
    if (n > T) {
        std::vector<std::size_t> keep(n);
        std::iota(keep.begin(), keep.end(), std::size_t{0});
        // Partial Fisher-Yates: the first T slots become a uniform random T-subset.
        for (std::size_t i = 0; i < T; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, n - 1);
            std::swap(keep[i], keep[pick(rng)]);
        }
        keep.resize(T);
        std::sort(keep.begin(), keep.end());
        out.sequence.frames.reserve(T);
        for (auto idx : keep) out.sequence.frames.push_back(seq.frames[idx]);
        out.mask.assign(T, true);
    } else {
        out.sequence.frames = seq.frames;
        out.sequence.frames.resize(T);
        out.mask.assign(T, false);
        std::fill_n(out.mask.begin(), n, true);
    }
    return out;
}

HandGeometry hand_geometry(const std::array<std::optional<HandCenter>, 2>& centers, HandTrackState& state) {
    std::array<HandCenter, 2> effective{};
    for (std::size_t h = 0; h < 2; ++h) {
        if (centers[h]) {
            state.last_seen[h] = centers[h];
            effective[h] = *centers[h];
        } else {
            effective[h] = state.last_seen[h].value_or(kUnseenHandCenter);
        }
    }
    const auto& left = effective[static_cast<std::size_t>(Hand::Left)];
    const auto& right = effective[static_cast<std::size_t>(Hand::Right)];
    const double dx = static_cast<double>(right.cx) - static_cast<double>(left.cx);
    const double dy = static_cast<double>(right.cy) - static_cast<double>(left.cy);
    HandGeometry g;
    g.distance = std::hypot(dx, dy);
    if (dx != 0.0 || dy != 0.0) {
        g.angle = std::atan2(dy, dx);
        // atan2 returns -pi for (-0, negative x); fold onto the (-pi, pi] range.
        if (g.angle <= -std::numbers::pi) g.angle = std::numbers::pi;
    }
    return g;
}

StreamBatch assemble_streams(const FeatureSequence& seq, std::size_t T, Rng& rng) {
    auto normalized = normalize_length(seq, T, rng);
    StreamBatch b;
    b.stream_a = FeatureMatrix::Zero(static_cast<Eigen::Index>(T), kStreamADim);
    b.stream_b = FeatureMatrix::Zero(static_cast<Eigen::Index>(T), kStreamBDim);
    b.stream_c = FeatureMatrix::Zero(static_cast<Eigen::Index>(T), kStreamCDim);
    b.mask = std::move(normalized.mask);
    HandTrackState state;
    for (std::size_t t = 0; t < T; ++t) {
        if (!b.mask[t]) continue;
        const auto& f = normalized.sequence.frames[t];
        const auto row = static_cast<Eigen::Index>(t);
        for (std::size_t d = 0; d < kHandShapeDim; ++d) b.stream_a(row, d) = f.hand_shape[d];
        for (std::size_t d = 0; d < kLipShapeDim; ++d) b.stream_b(row, d) = f.lip_shape[d];
        for (std::size_t d = 0; d < kArmPointsDim; ++d) b.stream_c(row, d) = f.arm_points[d];
        const auto geo = hand_geometry(f.hand_centers, state);
        b.stream_c(row, kArmPointsDim) = static_cast<float>(geo.distance);
        b.stream_c(row, kArmPointsDim + 1) = static_cast<float>(geo.angle);
    }
    return b;
}

}  // namespace slr
