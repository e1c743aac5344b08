#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace slr::nn {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

using Mask = std::vector<bool>;
using Rng = std::mt19937_64;

template <typename S>
struct Param {
    std::string name;
    Mat<S> value;
    Mat<S> grad;

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename S>
using ParamList = std::vector<Param<S>*>;

// Training-time dropout. A null Dropout* anywhere means evaluation mode.
struct Dropout {
    Rng& rng;
    double rate = 0.1;
};

// Sinusoidal table: PE[t, 2i] = sin(t / 10000^(2i/d)), PE[t, 2i+1] = cos(same).
template <typename S>
Mat<S> positional_encoding(std::size_t T, std::size_t d_model);

// Zeroes the rows whose mask entry is false.
template <typename S>
void zero_masked_rows(Mat<S>& m, const Mask& mask);

template <typename S>
class Linear {
public:
    Linear() = default;
    Linear(std::string name, std::size_t in, std::size_t out);

    void init(Rng& rng);  // Glorot-uniform weights, zero bias
    Mat<S> forward(const Mat<S>& x) const;
    // Accumulates parameter gradients and returns dL/dx.
    Mat<S> backward(const Mat<S>& x, const Mat<S>& dy);
    void collect(ParamList<S>& out);

    std::size_t in_features() const { return static_cast<std::size_t>(weight.value.rows()); }
    std::size_t out_features() const { return static_cast<std::size_t>(weight.value.cols()); }

    Param<S> weight;  // in x out
    Param<S> bias;    // 1 x out
};

template <typename S>
class LayerNorm {
public:
    struct Cache {
        Mat<S> normalized;
        Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std;
    };

    LayerNorm() = default;
    LayerNorm(std::string name, std::size_t dim);

    Mat<S> forward(const Mat<S>& x, Cache* cache) const;
    Mat<S> backward(const Cache& cache, const Mat<S>& dy);
    void collect(ParamList<S>& out);

    Param<S> gamma;
    Param<S> beta;
    static constexpr double kEpsilon = 1e-6;
};

template <typename S>
class MultiHeadAttention {
public:
    struct Cache {
        Mat<S> input, q, k, v, merged;
        std::vector<Mat<S>> weights;       // per head, T x T softmax output
        std::vector<Mat<S>> dropout_keep;  // per head; empty without dropout
        double keep_scale = 1.0;
    };

    MultiHeadAttention() = default;
    MultiHeadAttention(std::string name, std::size_t d_model, std::size_t heads);

    void init(Rng& rng);
    // Keys with mask=false get zero attention weight. Throws DegenerateInputError on an all-false mask.
    Mat<S> forward(const Mat<S>& x, const Mask& mask, Cache* cache, Dropout* dropout) const;
    Mat<S> backward(const Cache& cache, const Mat<S>& dy);
    void collect(ParamList<S>& out);

    std::size_t heads() const { return heads_; }

    Linear<S> query, key, value, output;

private:
    std::size_t heads_ = 1;
};

template <typename S>
class FeedForward {
public:
    struct Cache {
        Mat<S> input, pre_activation, hidden;
        Mat<S> dropout_keep;
        double keep_scale = 1.0;
    };

    FeedForward() = default;
    FeedForward(std::string name, std::size_t d_model, std::size_t width);

    void init(Rng& rng);
    Mat<S> forward(const Mat<S>& x, Cache* cache, Dropout* dropout) const;
    Mat<S> backward(const Cache& cache, const Mat<S>& dy);
    void collect(ParamList<S>& out);

    Linear<S> expand, contract;
};

// Post-norm encoder layer: H = LN(X + MHA(X)), Y = LN(H + FFN(H)), masked rows of Y zeroed.
template <typename S>
class EncoderBlock {
public:
    struct Cache {
        typename MultiHeadAttention<S>::Cache attention;
        typename LayerNorm<S>::Cache norm1, norm2;
        typename FeedForward<S>::Cache ffn;
        Mask mask;
    };

    EncoderBlock() = default;
    EncoderBlock(std::string name, std::size_t d_model, std::size_t heads, std::size_t ffn_width);

    void init(Rng& rng);
    Mat<S> forward(const Mat<S>& x, const Mask& mask, Cache* cache, Dropout* dropout) const;
    Mat<S> backward(const Cache& cache, const Mat<S>& dy);
    void collect(ParamList<S>& out);

    std::size_t d_model() const { return norm1.gamma.value.cols(); }

    MultiHeadAttention<S> attention;
    LayerNorm<S> norm1;
    FeedForward<S> ffn;
    LayerNorm<S> norm2;
};

struct EncoderConfig {
    std::size_t d_model = 264;
    std::size_t heads = 12;
    std::size_t ffn_width = 512;
    std::size_t blocks = 1;
    double dropout_rate = 0.1;

    void validate(const std::string& what) const;
    bool operator==(const EncoderConfig&) const = default;
};

// Optional input projection + positional encoding, a block stack, and an additive
// skip from the (projected, position-encoded) input to the stack output.
template <typename S>
class Encoder {
public:
    struct Cache {
        Mat<S> raw_input;
        Mat<S> stack_input;
        std::vector<typename EncoderBlock<S>::Cache> blocks;
        Mask mask;
    };

    Encoder() = default;
    // input_dim == 0 means no projection: the input already has d_model columns.
    Encoder(std::string name, const EncoderConfig& cfg, std::size_t input_dim, bool positional);

    void init(Rng& rng);
    Mat<S> forward(const Mat<S>& x, const Mask& mask, Cache* cache, Dropout* dropout) const;
    Mat<S> backward(const Cache& cache, const Mat<S>& dy);
    void collect(ParamList<S>& out);

    const EncoderConfig& config() const { return cfg_; }

    std::optional<Linear<S>> projection;
    std::vector<EncoderBlock<S>> blocks;

private:
    EncoderConfig cfg_;
    bool positional_ = true;
};

}  // namespace slr::nn
