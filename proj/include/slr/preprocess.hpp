#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "slr/featurestore.hpp"

namespace slr {

inline constexpr std::size_t kDefaultSequenceLength = 40;
inline constexpr std::size_t kStreamADim = kHandShapeDim;
inline constexpr std::size_t kStreamBDim = kLipShapeDim;
inline constexpr std::size_t kStreamCDim = kArmPointsDim + 2;  // arm points, hand distance, hand angle

using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Rng = std::mt19937_64;

// Fixed-length three-stream view of one record. Rows past the valid prefix are zero.
struct StreamBatch {
    FeatureMatrix stream_a;  // T x 126 hand shape
    FeatureMatrix stream_b;  // T x 120 lip shape
    FeatureMatrix stream_c;  // T x 14  arm points + (distance, angle)
    std::vector<bool> mask;  // true = real frame

    std::size_t length() const { return mask.size(); }
    std::size_t valid_count() const;
};

// Which streams reach the model. Disabled streams are fed as zeros.
struct StreamToggles {
    bool a = true;
    bool b = true;
    bool c = true;

    bool operator==(const StreamToggles&) const = default;
};

void apply_toggles(StreamBatch& batch, const StreamToggles& toggles);

struct HandTrackState {
    std::array<std::optional<HandCenter>, 2> last_seen{};
};

struct HandGeometry {
    double distance = 0.0;
    double angle = 0.0;  // radians, left -> right segment, y grows downward
};

// Substitute for a hand with no detection history: bottom-center of the image.
inline constexpr HandCenter kUnseenHandCenter{0.5f, 1.0f};

struct LengthNormalized {
    FeatureSequence sequence;
    std::vector<bool> mask;
};

// Randomly deletes frames down to T (keeping order) or zero-pads up to T.
LengthNormalized normalize_length(const FeatureSequence& seq, std::size_t T, Rng& rng);

// Updates state with the present centers and returns distance/angle of the effective centers.
HandGeometry hand_geometry(const std::array<std::optional<HandCenter>, 2>& centers, HandTrackState& state);

StreamBatch assemble_streams(const FeatureSequence& seq, std::size_t T, Rng& rng);

}  // namespace slr
