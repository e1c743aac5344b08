#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "slr/layers.hpp"
#include "slr/preprocess.hpp"

namespace slr {

enum class Architecture { Early, Late };

std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& s);

struct ModelConfig {
    Architecture arch = Architecture::Late;
    std::size_t num_classes = 10;
    std::size_t embedding_dim = kEmbeddingDim;
    // Late fusion: one encoder per stream, then a fused encoder over the concatenation.
    nn::EncoderConfig stream_a{120, 12, 256, 1, 0.1};  // hand shape
    nn::EncoderConfig stream_b{120, 12, 64, 1, 0.1};   // lip shape
    nn::EncoderConfig stream_c{24, 12, 256, 1, 0.1};   // arm points + hand geometry
    nn::EncoderConfig fused{264, 12, 512, 1, 0.1};
    // Early fusion: the 260-wide frame is projected once and encoded once.
    nn::EncoderConfig early{264, 12, 512, 1, 0.1};

    static ModelConfig late_default(std::size_t num_classes);
    static ModelConfig early_default(std::size_t num_classes);

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

template <typename S>
struct ForwardOutput {
    nn::RowVec<S> logits;
    nn::RowVec<S> class_probs;  // softmax(logits)
    nn::RowVec<S> embedding;    // linear head
};

// Early- or late-fusion transformer classifier with a class head and an embedding head.
template <typename S>
class FusionModel {
public:
    struct Cache {
        typename nn::Encoder<S>::Cache a, b, c, fused;
        nn::Mat<S> pooled;
        std::size_t valid = 0;
    };

    explicit FusionModel(const ModelConfig& cfg);

    void init(std::uint64_t seed);
    ForwardOutput<S> forward(const StreamBatch& batch, Cache* cache = nullptr, nn::Dropout* dropout = nullptr) const;
    void backward(const Cache& cache, const nn::RowVec<S>& dlogits, const nn::RowVec<S>& dembedding);

    nn::ParamList<S> parameters();
    std::vector<const nn::Param<S>*> parameters() const;
    void zero_grad();
    std::size_t parameter_count() const;

    const ModelConfig& config() const { return cfg_; }

private:
    ModelConfig cfg_;
    nn::Encoder<S> enc_a_, enc_b_, enc_c_, fused_;
    nn::Linear<S> class_head_, embedding_head_;
};

// Class probabilities for one assembled record or window.
using ProbabilityFn = std::function<std::vector<double>(const StreamBatch&)>;

// The model is captured by reference and must outlive the returned function.
ProbabilityFn make_probability_fn(const FusionModel<float>& model, StreamToggles toggles = {});

// --- losses ---

struct LossWeights {
    double class_weight = 1.8;
    double embedding_weight = 0.5;
};

std::vector<double> label_smooth(std::span<const double> onehot, double epsilon = 0.15);
std::vector<double> one_hot(std::size_t num_classes, std::size_t label);
double cross_entropy(std::span<const double> probs, std::span<const double> target);
// Negative cosine similarity; throws DegenerateInputError on a zero-norm target.
double cosine_loss(std::span<const double> pred, std::span<const double> target);
double combined_loss(double ce, double cos, const LossWeights& w = {});

template <typename S>
nn::RowVec<S> softmax(const nn::RowVec<S>& logits);

template <typename S>
struct LossGradient {
    double loss = 0.0;
    double cross_entropy = 0.0;
    double cosine = 0.0;
    nn::RowVec<S> dlogits;
    nn::RowVec<S> dembedding;
};

// Combined loss of one sample plus its gradients w.r.t. logits and embedding prediction.
// target_probs is the (possibly smoothed) class target.
template <typename S>
LossGradient<S> loss_and_gradient(const ForwardOutput<S>& out, std::span<const double> target_probs,
                                  std::span<const float> target_embedding, const LossWeights& w);

// Classification-only variant (no embedding head); used by the ensemble head.
template <typename S>
LossGradient<S> class_loss_and_gradient(const nn::RowVec<S>& logits, const nn::RowVec<S>& probs,
                                        std::span<const double> target_probs, double class_weight);

// --- checkpoint container ---
//
// "SLRC" | u64 header length | JSON header | little-endian f32 payload.
// The header holds "config", free-form "meta" and "tensors": [{name, shape, offset, length}],
// offsets counted in bytes from the start of the payload.

struct TensorBlob {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;
};

struct CheckpointFile {
    nlohmann::json config;
    nlohmann::json meta;
    std::vector<TensorBlob> tensors;
};

void write_checkpoint_file(const CheckpointFile& ckpt, const std::filesystem::path& path);
CheckpointFile read_checkpoint_file(const std::filesystem::path& path);

template <typename S>
std::vector<TensorBlob> export_tensors(const std::vector<const nn::Param<S>*>& params);
template <typename S>
void import_tensors(const std::vector<TensorBlob>& blobs, const nn::ParamList<S>& params);

void save_model(const FusionModel<float>& model, const nlohmann::json& meta, const std::filesystem::path& path);
FusionModel<float> load_model(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

// Same architecture and weights in another scalar type.
template <typename To, typename From>
FusionModel<To> convert_model(const FusionModel<From>& src) {
    FusionModel<To> dst(src.config());
    auto from = src.parameters();
    auto to = dst.parameters();
    for (std::size_t i = 0; i < to.size(); ++i) {
        to[i]->value = from[i]->value.template cast<To>();
        to[i]->zero_grad();
    }
    return dst;
}

}  // namespace slr
