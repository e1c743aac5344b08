#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace slr {

inline constexpr std::size_t kHandShapeDim = 126;  // 21 points x 2 hands x (x,y,z)
inline constexpr std::size_t kArmPointsDim = 12;   // wrist + elbow x 2 hands x (x,y,z)
inline constexpr std::size_t kLipShapeDim = 120;   // 40 lip points x (x,y,z)
inline constexpr std::size_t kFrameDim = kHandShapeDim + kArmPointsDim + kLipShapeDim;
inline constexpr std::size_t kEmbeddingDim = 300;
inline constexpr std::size_t kHandShapePerHand = kHandShapeDim / 2;

enum class Hand : std::size_t { Left = 0, Right = 1 };

// Normalized image coordinates of a detected hand's bounding-box center.
struct HandCenter {
    float cx = 0.0f;
    float cy = 0.0f;
    bool operator==(const HandCenter&) const = default;
};

struct FrameFeatures {
    std::array<float, kHandShapeDim> hand_shape{};
    std::array<float, kArmPointsDim> arm_points{};
    std::array<float, kLipShapeDim> lip_shape{};
    // Indexed by Hand. nullopt means the hand was not detected in this frame.
    std::array<std::optional<HandCenter>, 2> hand_centers{};

    bool operator==(const FrameFeatures&) const = default;
};

// One recorded sign. The gloss is carried by the manifest's class table and is
// not part of the record file.
struct FeatureSequence {
    std::vector<FrameFeatures> frames;
    std::optional<std::uint32_t> label_id;
    std::uint32_t signer_id = 0;
    std::optional<std::string> gloss;

    std::size_t length() const { return frames.size(); }
    bool operator==(const FeatureSequence&) const = default;
};

enum class Split { Train, Val, Test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct RecordEntry {
    std::string path;  // relative to the manifest's directory
    std::uint32_t signer_id = 0;
    std::uint32_t label_id = 0;
    Split split = Split::Train;
};

struct DatasetManifest {
    std::vector<std::string> classes;  // index == class_id
    std::vector<RecordEntry> records;
    std::string embeddings_path = "embeddings.json";

    std::size_t num_classes() const { return classes.size(); }
    // Throws ConfigError if class ids are out of range or the splits share a signer.
    void validate() const;
};

struct EmbeddingTable {
    std::vector<std::vector<float>> vectors;  // index == class_id, each kEmbeddingDim long

    void validate(std::size_t num_classes) const;
};

// Manifest, the records it lists (in manifest order) and the embedding table.
struct Dataset {
    DatasetManifest manifest;
    std::vector<FeatureSequence> records;
    EmbeddingTable embeddings;

    std::size_t num_classes() const { return manifest.num_classes(); }
    std::vector<const FeatureSequence*> split(Split s) const;
};

// --- record container (.slf) ---

inline constexpr std::uint16_t kRecordFormatVersion = 1;

std::vector<std::uint8_t> encode_record(const FeatureSequence& seq);
FeatureSequence decode_record(std::span<const std::uint8_t> bytes);

void save_record(const FeatureSequence& seq, const std::filesystem::path& path);
FeatureSequence load_record(const std::filesystem::path& path);

// --- manifest / embedding JSON ---

nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);
nlohmann::json embeddings_to_json(const EmbeddingTable& t);
EmbeddingTable embeddings_from_json(const nlohmann::json& j);

// Writes records/, manifest.json and the embedding table under dir. Returns the manifest path.
std::filesystem::path write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& manifest_path);

// --- synthetic corpus ---

struct SynthParams {
    std::size_t n_classes = 10;
    std::size_t n_per_signer_class = 5;
    std::size_t n_signers = 5;
    std::size_t min_length = 21;
    std::size_t max_length = 116;
    double noise_sigma = 0.05;
    std::uint64_t seed = 0;
    bool split_by_signer = true;
};

// Class-anchored interpolated trajectories with per-signer offsets and Gaussian
// noise. Signers are shuffled and split n-2 / 1 / 1 into train / val / test.
Dataset generate_synthetic_dataset(const SynthParams& p);

// --- sentences ---

struct Sentence {
    FeatureSequence sequence;
    std::vector<std::uint32_t> reference;  // label ids in order
};

Sentence concat_sentence(std::span<const FeatureSequence> records);
Sentence concat_sentence(std::span<const FeatureSequence* const> records);

DatasetManifest split_by_signer(DatasetManifest manifest,
                                const std::vector<std::uint32_t>& train_ids,
                                const std::vector<std::uint32_t>& val_ids,
                                const std::vector<std::uint32_t>& test_ids);

}  // namespace slr
