#include "slr/layers.hpp"

#include <cmath>
#include <limits>

#include "slr/errors.hpp"

namespace slr::nn {

namespace {

template <typename S>
Mat<S> bernoulli_keep(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Mat<S> keep(rows, cols);
    for (Eigen::Index i = 0; i < keep.size(); ++i) keep.data()[i] = u(rng) >= rate ? S(1) : S(0);
    return keep;
}

void check_cols(Eigen::Index got, std::size_t want, const std::string& who) {
    if (static_cast<std::size_t>(got) != want)
        throw ConfigError(who + ": expected " + std::to_string(want) + " input columns, got " +
                          std::to_string(got));
}

}  // namespace

template <typename S>
Mat<S> positional_encoding(std::size_t T, std::size_t d_model) {
    if (T == 0 || d_model == 0) throw ConfigError("positional encoding needs T, d_model >= 1");
    if (d_model % 2 != 0) throw ConfigError("positional encoding needs an even d_model");
    Mat<S> pe(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(d_model));
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t i = 0; i < d_model / 2; ++i) {
            const double rate = std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
            const double arg = static_cast<double>(t) / rate;
            pe(t, 2 * i) = static_cast<S>(std::sin(arg));
            pe(t, 2 * i + 1) = static_cast<S>(std::cos(arg));
        }
    }
    return pe;
}

template <typename S>
void zero_masked_rows(Mat<S>& m, const Mask& mask) {
    for (std::size_t t = 0; t < mask.size(); ++t)
        if (!mask[t]) m.row(static_cast<Eigen::Index>(t)).setZero();
}

// ---------------------------------------------------------------- Linear

template <typename S>
Linear<S>::Linear(std::string name, std::size_t in, std::size_t out) {
    weight.name = name + ".weight";
    weight.value = Mat<S>::Zero(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
    weight.zero_grad();
    bias.name = name + ".bias";
    bias.value = Mat<S>::Zero(1, static_cast<Eigen::Index>(out));
    bias.zero_grad();
}

template <typename S>
void Linear<S>::init(Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(weight.value.rows() + weight.value.cols()));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (Eigen::Index i = 0; i < weight.value.size(); ++i) weight.value.data()[i] = static_cast<S>(u(rng));
    bias.value.setZero();
}

template <typename S>
Mat<S> Linear<S>::forward(const Mat<S>& x) const {
    check_cols(x.cols(), in_features(), weight.name);
    Mat<S> y = x * weight.value;
    y.rowwise() += bias.value.row(0);
    return y;
}

template <typename S>
Mat<S> Linear<S>::backward(const Mat<S>& x, const Mat<S>& dy) {
    weight.grad.noalias() += x.transpose() * dy;
    bias.grad += dy.colwise().sum();
    return dy * weight.value.transpose();
}

template <typename S>
void Linear<S>::collect(ParamList<S>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
}

// ---------------------------------------------------------------- LayerNorm

template <typename S>
LayerNorm<S>::LayerNorm(std::string name, std::size_t dim) {
    gamma.name = name + ".gamma";
    gamma.value = Mat<S>::Ones(1, static_cast<Eigen::Index>(dim));
    gamma.zero_grad();
    beta.name = name + ".beta";
    beta.value = Mat<S>::Zero(1, static_cast<Eigen::Index>(dim));
    beta.zero_grad();
}

template <typename S>
Mat<S> LayerNorm<S>::forward(const Mat<S>& x, Cache* cache) const {
    const auto n = x.cols();
    Mat<S> xhat(x.rows(), n);
    Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const S mean = x.row(r).mean();
        const auto centered = (x.row(r).array() - mean).matrix();
        const S var = centered.squaredNorm() / static_cast<S>(n);
        inv_std(r) = S(1) / std::sqrt(var + static_cast<S>(kEpsilon));
        xhat.row(r) = centered * inv_std(r);
    }
    Mat<S> y = (xhat.array().rowwise() * gamma.value.row(0).array()).matrix();
    y.rowwise() += beta.value.row(0);
    if (cache) {
        cache->normalized = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

template <typename S>
Mat<S> LayerNorm<S>::backward(const Cache& cache, const Mat<S>& dy) {
    const auto& xhat = cache.normalized;
    gamma.grad += (dy.array() * xhat.array()).matrix().colwise().sum();
    beta.grad += dy.colwise().sum();
    const Mat<S> dxhat = (dy.array().rowwise() * gamma.value.row(0).array()).matrix();
    Mat<S> dx(dy.rows(), dy.cols());
    const auto n = static_cast<S>(dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const S mean_d = dxhat.row(r).sum() / n;
        const S mean_dx = dxhat.row(r).dot(xhat.row(r)) / n;
        dx.row(r) = cache.inv_std(r) * ((dxhat.row(r).array() - mean_d) - xhat.row(r).array() * mean_dx).matrix();
    }
    return dx;
}

template <typename S>
void LayerNorm<S>::collect(ParamList<S>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
}

// ---------------------------------------------------------------- MultiHeadAttention

template <typename S>
MultiHeadAttention<S>::MultiHeadAttention(std::string name, std::size_t d_model, std::size_t heads)
    : query(name + ".query", d_model, d_model),
      key(name + ".key", d_model, d_model),
      value(name + ".value", d_model, d_model),
      output(name + ".output", d_model, d_model),
      heads_(heads) {
    if (heads == 0 || d_model % heads != 0)
        throw ConfigError(name + ": d_model " + std::to_string(d_model) + " is not divisible by " +
                          std::to_string(heads) + " heads");
}

template <typename S>
void MultiHeadAttention<S>::init(Rng& rng) {
    query.init(rng);
    key.init(rng);
    value.init(rng);
    output.init(rng);
}

template <typename S>
Mat<S> MultiHeadAttention<S>::forward(const Mat<S>& x, const Mask& mask, Cache* cache, Dropout* dropout) const {
    const auto T = x.rows();
    if (static_cast<std::size_t>(T) != mask.size()) throw ConfigError("attention: mask length differs from T");
    std::vector<Eigen::Index> valid;
    for (Eigen::Index t = 0; t < T; ++t)
        if (mask[static_cast<std::size_t>(t)]) valid.push_back(t);
    if (valid.empty()) throw DegenerateInputError("attention over an all-false mask");

    Mat<S> q = query.forward(x);
    Mat<S> k = key.forward(x);
    Mat<S> v = value.forward(x);
    const auto d = x.cols();
    const auto dk = d / static_cast<Eigen::Index>(heads_);
    const S scale = S(1) / std::sqrt(static_cast<S>(dk));
    const bool drop = dropout && dropout->rate > 0.0;
    const double keep_scale = drop ? 1.0 / (1.0 - dropout->rate) : 1.0;

    Mat<S> merged(T, d);
    if (cache) {
        cache->weights.assign(heads_, Mat<S>());
        cache->dropout_keep.assign(drop ? heads_ : 0, Mat<S>());
        cache->keep_scale = keep_scale;
    }
    for (std::size_t h = 0; h < heads_; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * dk;
        Mat<S> scores = q.middleCols(off, dk) * k.middleCols(off, dk).transpose();
        scores *= scale;
        Mat<S> w = Mat<S>::Zero(T, T);
        for (Eigen::Index i = 0; i < T; ++i) {
            S mx = -std::numeric_limits<S>::infinity();
            for (auto j : valid) mx = std::max(mx, scores(i, j));
            S sum = 0;
            for (auto j : valid) {
                w(i, j) = std::exp(scores(i, j) - mx);
                sum += w(i, j);
            }
            for (auto j : valid) w(i, j) /= sum;
        }
        if (drop) {
            Mat<S> keep = bernoulli_keep<S>(T, T, dropout->rate, dropout->rng);
            merged.middleCols(off, dk) =
                (w.array() * keep.array()).matrix() * v.middleCols(off, dk) * static_cast<S>(keep_scale);
            if (cache) cache->dropout_keep[h] = std::move(keep);
        } else {
            merged.middleCols(off, dk) = w * v.middleCols(off, dk);
        }
        if (cache) cache->weights[h] = std::move(w);
    }
    Mat<S> y = output.forward(merged);
    if (cache) {
        cache->input = x;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->merged = std::move(merged);
    }
    return y;
}

template <typename S>
Mat<S> MultiHeadAttention<S>::backward(const Cache& c, const Mat<S>& dy) {
    const Mat<S> dmerged = output.backward(c.merged, dy);
    const auto T = c.input.rows();
    const auto d = c.input.cols();
    const auto dk = d / static_cast<Eigen::Index>(heads_);
    const S scale = S(1) / std::sqrt(static_cast<S>(dk));
    Mat<S> dq(T, d), dk_all(T, d), dv(T, d);
    for (std::size_t h = 0; h < heads_; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * dk;
        const auto& w = c.weights[h];
        const auto dout = dmerged.middleCols(off, dk);
        Mat<S> dw = dout * c.v.middleCols(off, dk).transpose();
        if (!c.dropout_keep.empty()) {
            const Mat<S> used = (w.array() * c.dropout_keep[h].array()).matrix() * static_cast<S>(c.keep_scale);
            dv.middleCols(off, dk) = used.transpose() * dout;
            dw = (dw.array() * c.dropout_keep[h].array()).matrix() * static_cast<S>(c.keep_scale);
        } else {
            dv.middleCols(off, dk) = w.transpose() * dout;
        }
        // softmax backward, row by row: dS = W o (dW - rowsum(dW o W))
        const Eigen::Matrix<S, Eigen::Dynamic, 1> inner = (dw.array() * w.array()).rowwise().sum();
        Mat<S> ds = (w.array() * (dw.array().colwise() - inner.array())).matrix();
        ds *= scale;
        dq.middleCols(off, dk) = ds * c.k.middleCols(off, dk);
        dk_all.middleCols(off, dk) = ds.transpose() * c.q.middleCols(off, dk);
    }
    Mat<S> dx = query.backward(c.input, dq);
    dx += key.backward(c.input, dk_all);
    dx += value.backward(c.input, dv);
    return dx;
}

template <typename S>
void MultiHeadAttention<S>::collect(ParamList<S>& out) {
    query.collect(out);
    key.collect(out);
    value.collect(out);
    output.collect(out);
}

// ---------------------------------------------------------------- FeedForward

template <typename S>
FeedForward<S>::FeedForward(std::string name, std::size_t d_model, std::size_t width)
    : expand(name + ".expand", d_model, width), contract(name + ".contract", width, d_model) {
    if (width == 0) throw ConfigError(name + ": feed-forward width must be at least 1");
}

template <typename S>
void FeedForward<S>::init(Rng& rng) {
    expand.init(rng);
    contract.init(rng);
}

template <typename S>
Mat<S> FeedForward<S>::forward(const Mat<S>& x, Cache* cache, Dropout* dropout) const {
    Mat<S> pre = expand.forward(x);
    Mat<S> hidden = pre.cwiseMax(S(0));
    const bool drop = dropout && dropout->rate > 0.0;
    if (drop) {
        Mat<S> keep = bernoulli_keep<S>(hidden.rows(), hidden.cols(), dropout->rate, dropout->rng);
        const double keep_scale = 1.0 / (1.0 - dropout->rate);
        hidden = (hidden.array() * keep.array()).matrix() * static_cast<S>(keep_scale);
        if (cache) {
            cache->dropout_keep = std::move(keep);
            cache->keep_scale = keep_scale;
        }
    } else if (cache) {
        cache->dropout_keep.resize(0, 0);
        cache->keep_scale = 1.0;
    }
    Mat<S> y = contract.forward(hidden);
    if (cache) {
        cache->input = x;
        cache->pre_activation = std::move(pre);
        cache->hidden = std::move(hidden);
    }
    return y;
}

template <typename S>
Mat<S> FeedForward<S>::backward(const Cache& c, const Mat<S>& dy) {
    Mat<S> dh = contract.backward(c.hidden, dy);
    if (c.dropout_keep.size() > 0)
        dh = (dh.array() * c.dropout_keep.array()).matrix() * static_cast<S>(c.keep_scale);
    dh = (dh.array() * (c.pre_activation.array() > S(0)).template cast<S>()).matrix();
    return expand.backward(c.input, dh);
}

template <typename S>
void FeedForward<S>::collect(ParamList<S>& out) {
    expand.collect(out);
    contract.collect(out);
}

// ---------------------------------------------------------------- EncoderBlock

template <typename S>
EncoderBlock<S>::EncoderBlock(std::string name, std::size_t d_model, std::size_t heads, std::size_t ffn_width)
    : attention(name + ".attention", d_model, heads),
      norm1(name + ".norm1", d_model),
      ffn(name + ".ffn", d_model, ffn_width),
      norm2(name + ".norm2", d_model) {}

template <typename S>
void EncoderBlock<S>::init(Rng& rng) {
    attention.init(rng);
    ffn.init(rng);
}

template <typename S>
Mat<S> EncoderBlock<S>::forward(const Mat<S>& x, const Mask& mask, Cache* cache, Dropout* dropout) const {
    check_cols(x.cols(), d_model(), norm1.gamma.name);
    Mat<S> r1 = x + attention.forward(x, mask, cache ? &cache->attention : nullptr, dropout);
    Mat<S> h = norm1.forward(r1, cache ? &cache->norm1 : nullptr);
    Mat<S> r2 = h + ffn.forward(h, cache ? &cache->ffn : nullptr, dropout);
    Mat<S> y = norm2.forward(r2, cache ? &cache->norm2 : nullptr);
    zero_masked_rows(y, mask);
    if (cache) cache->mask = mask;
    return y;
}

template <typename S>
Mat<S> EncoderBlock<S>::backward(const Cache& c, const Mat<S>& dy_in) {
    Mat<S> dy = dy_in;
    zero_masked_rows(dy, c.mask);
    Mat<S> dr2 = norm2.backward(c.norm2, dy);
    Mat<S> dh = dr2 + ffn.backward(c.ffn, dr2);
    Mat<S> dr1 = norm1.backward(c.norm1, dh);
    return dr1 + attention.backward(c.attention, dr1);
}

template <typename S>
void EncoderBlock<S>::collect(ParamList<S>& out) {
    attention.collect(out);
    norm1.collect(out);
    ffn.collect(out);
    norm2.collect(out);
}

// ---------------------------------------------------------------- Encoder

void EncoderConfig::validate(const std::string& what) const {
    if (d_model == 0 || heads == 0 || d_model % heads != 0)
        throw ConfigError(what + ": d_model must be a positive multiple of heads");
    if (ffn_width == 0) throw ConfigError(what + ": ffn_width must be at least 1");
    if (blocks == 0) throw ConfigError(what + ": needs at least one block");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError(what + ": dropout rate must lie in [0,1)");
}

template <typename S>
Encoder<S>::Encoder(std::string name, const EncoderConfig& cfg, std::size_t input_dim, bool positional)
    : cfg_(cfg), positional_(positional) {
    cfg.validate(name);
    if (positional && cfg.d_model % 2 != 0) throw ConfigError(name + ": positional encoding needs an even d_model");
    if (input_dim > 0) projection.emplace(name + ".projection", input_dim, cfg.d_model);
    for (std::size_t b = 0; b < cfg.blocks; ++b)
        blocks.emplace_back(name + ".block" + std::to_string(b), cfg.d_model, cfg.heads, cfg.ffn_width);
}

template <typename S>
void Encoder<S>::init(Rng& rng) {
    if (projection) projection->init(rng);
    for (auto& b : blocks) b.init(rng);
}

template <typename S>
Mat<S> Encoder<S>::forward(const Mat<S>& x, const Mask& mask, Cache* cache, Dropout* dropout) const {
    Mat<S> p = projection ? projection->forward(x) : x;
    check_cols(p.cols(), cfg_.d_model, "encoder input");
    if (positional_) p += positional_encoding<S>(static_cast<std::size_t>(p.rows()), cfg_.d_model);
    std::optional<Dropout> local;
    if (dropout) local.emplace(Dropout{dropout->rng, cfg_.dropout_rate});
    Dropout* drop = local ? &*local : nullptr;

    if (cache) cache->blocks.resize(blocks.size());
    Mat<S> z = p;
    for (std::size_t b = 0; b < blocks.size(); ++b)
        z = blocks[b].forward(z, mask, cache ? &cache->blocks[b] : nullptr, drop);
    z += p;
    zero_masked_rows(z, mask);
    if (cache) {
        if (projection) cache->raw_input = x;
        cache->stack_input = std::move(p);
        cache->mask = mask;
    }
    return z;
}

template <typename S>
Mat<S> Encoder<S>::backward(const Cache& c, const Mat<S>& dy_in) {
    Mat<S> dy = dy_in;
    zero_masked_rows(dy, c.mask);
    Mat<S> dz = dy;
    for (std::size_t b = blocks.size(); b-- > 0;) dz = blocks[b].backward(c.blocks[b], dz);
    Mat<S> dp = dz + dy;
    if (projection) return projection->backward(c.raw_input, dp);
    return dp;
}

template <typename S>
void Encoder<S>::collect(ParamList<S>& out) {
    if (projection) projection->collect(out);
    for (auto& b : blocks) b.collect(out);
}

#define SLR_INSTANTIATE_LAYERS(S)                                  \
    template Mat<S> positional_encoding<S>(std::size_t, std::size_t); \
    template void zero_masked_rows<S>(Mat<S>&, const Mask&);       \
    template class Linear<S>;                                      \
    template class LayerNorm<S>;                                   \
    template class MultiHeadAttention<S>;                          \
    template class FeedForward<S>;                                 \
    template class EncoderBlock<S>;                                \
    template class Encoder<S>;

SLR_INSTANTIATE_LAYERS(float)
SLR_INSTANTIATE_LAYERS(double)

#undef SLR_INSTANTIATE_LAYERS

}  // namespace slr::nn
