#include "slr/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "slr/errors.hpp"

namespace slr {

namespace {

constexpr double kLogClamp = 1e-12;
constexpr std::array<char, 4> kCheckpointMagic = {'S', 'L', 'R', 'C'};

nlohmann::json encoder_to_json(const nn::EncoderConfig& c) {
    return {{"d_model", c.d_model},
            {"heads", c.heads},
            {"ffn_width", c.ffn_width},
            {"blocks", c.blocks},
            {"dropout_rate", c.dropout_rate}};
}

nn::EncoderConfig encoder_from_json(const nlohmann::json& j) {
    nn::EncoderConfig c;
    c.d_model = j.at("d_model").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.ffn_width = j.at("ffn_width").get<std::size_t>();
    c.blocks = j.at("blocks").get<std::size_t>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    return c;
}

template <typename S>
nn::Mat<S> to_scalar(const FeatureMatrix& m) {
    if constexpr (std::is_same_v<S, float>) {
        return m;
    } else {
        return m.cast<S>();
    }
}

}  // namespace

std::string to_string(Architecture a) { return a == Architecture::Early ? "early" : "late"; }

Architecture architecture_from_string(const std::string& s) {
    if (s == "early") return Architecture::Early;
    if (s == "late") return Architecture::Late;
    throw ConfigError("unknown architecture '" + s + "' (expected early or late)");
}

ModelConfig ModelConfig::late_default(std::size_t num_classes) {
    ModelConfig c;
    c.arch = Architecture::Late;
    c.num_classes = num_classes;
    return c;
}

ModelConfig ModelConfig::early_default(std::size_t num_classes) {
    ModelConfig c;
    c.arch = Architecture::Early;
    c.num_classes = num_classes;
    return c;
}

void ModelConfig::validate() const {
    if (num_classes < 2) throw ConfigError("model needs at least 2 classes");
    if (embedding_dim < 1) throw ConfigError("embedding head needs at least 1 output");
    if (arch == Architecture::Late) {
        stream_a.validate("stream_a");
        stream_b.validate("stream_b");
        stream_c.validate("stream_c");
        fused.validate("fused");
        if (fused.d_model != stream_a.d_model + stream_b.d_model + stream_c.d_model)
            throw ConfigError("fused d_model must equal the sum of the stream widths");
    } else {
        early.validate("early");
    }
}

nlohmann::json ModelConfig::to_json() const {
    return {{"arch", to_string(arch)},
            {"num_classes", num_classes},
            {"embedding_dim", embedding_dim},
            {"stream_a", encoder_to_json(stream_a)},
            {"stream_b", encoder_to_json(stream_b)},
            {"stream_c", encoder_to_json(stream_c)},
            {"fused", encoder_to_json(fused)},
            {"early", encoder_to_json(early)}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.arch = architecture_from_string(j.at("arch").get<std::string>());
        c.num_classes = j.at("num_classes").get<std::size_t>();
        c.embedding_dim = j.at("embedding_dim").get<std::size_t>();
        c.stream_a = encoder_from_json(j.at("stream_a"));
        c.stream_b = encoder_from_json(j.at("stream_b"));
        c.stream_c = encoder_from_json(j.at("stream_c"));
        c.fused = encoder_from_json(j.at("fused"));
        c.early = encoder_from_json(j.at("early"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed model config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------- FusionModel

template <typename S>
FusionModel<S>::FusionModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::size_t pooled_width = 0;
    if (cfg_.arch == Architecture::Late) {
        enc_a_ = nn::Encoder<S>("late.stream_a", cfg_.stream_a, kStreamADim, true);
        enc_b_ = nn::Encoder<S>("late.stream_b", cfg_.stream_b, kStreamBDim, true);
        enc_c_ = nn::Encoder<S>("late.stream_c", cfg_.stream_c, kStreamCDim, true);
        fused_ = nn::Encoder<S>("late.fused", cfg_.fused, 0, false);
        pooled_width = cfg_.fused.d_model;
    } else {
        fused_ = nn::Encoder<S>("early.encoder", cfg_.early, kStreamADim + kStreamBDim + kStreamCDim, true);
        pooled_width = cfg_.early.d_model;
    }
    const std::string prefix = to_string(cfg_.arch);
    class_head_ = nn::Linear<S>(prefix + ".class_head", pooled_width, cfg_.num_classes);
    embedding_head_ = nn::Linear<S>(prefix + ".embedding_head", pooled_width, cfg_.embedding_dim);
}

template <typename S>
void FusionModel<S>::init(std::uint64_t seed) {
    nn::Rng rng(seed);
    if (cfg_.arch == Architecture::Late) {
        enc_a_.init(rng);
        enc_b_.init(rng);
        enc_c_.init(rng);
    }
    fused_.init(rng);
    class_head_.init(rng);
    embedding_head_.init(rng);
}

template <typename S>
ForwardOutput<S> FusionModel<S>::forward(const StreamBatch& batch, Cache* cache, nn::Dropout* dropout) const {
    const auto T = static_cast<Eigen::Index>(batch.length());
    if (batch.stream_a.rows() != T || batch.stream_b.rows() != T || batch.stream_c.rows() != T)
        throw ConfigError("stream batch rows disagree with mask length");
    if (batch.stream_a.cols() != static_cast<Eigen::Index>(kStreamADim) ||
        batch.stream_b.cols() != static_cast<Eigen::Index>(kStreamBDim) ||
        batch.stream_c.cols() != static_cast<Eigen::Index>(kStreamCDim))
        throw ConfigError("stream widths must be 126 / 120 / 14");
    const std::size_t valid = batch.valid_count();
    if (valid == 0) throw DegenerateInputError("stream batch has no valid frames");

    nn::Mat<S> encoded;
    if (cfg_.arch == Architecture::Late) {
        const nn::Mat<S> ea = enc_a_.forward(to_scalar<S>(batch.stream_a), batch.mask, cache ? &cache->a : nullptr, dropout);
        const nn::Mat<S> eb = enc_b_.forward(to_scalar<S>(batch.stream_b), batch.mask, cache ? &cache->b : nullptr, dropout);
        const nn::Mat<S> ec = enc_c_.forward(to_scalar<S>(batch.stream_c), batch.mask, cache ? &cache->c : nullptr, dropout);
        nn::Mat<S> cat(T, ea.cols() + eb.cols() + ec.cols());
        cat << ea, eb, ec;
        encoded = fused_.forward(cat, batch.mask, cache ? &cache->fused : nullptr, dropout);
    } else {
        nn::Mat<S> cat(T, static_cast<Eigen::Index>(kStreamADim + kStreamBDim + kStreamCDim));
        cat << to_scalar<S>(batch.stream_a), to_scalar<S>(batch.stream_b), to_scalar<S>(batch.stream_c);
        encoded = fused_.forward(cat, batch.mask, cache ? &cache->fused : nullptr, dropout);
    }

    // Masked rows of an encoder output are zero, so the column sum only sees real frames.
    nn::Mat<S> pooled = encoded.colwise().sum() / static_cast<S>(valid);
    ForwardOutput<S> out;
    out.logits = class_head_.forward(pooled).row(0);
    out.class_probs = softmax<S>(out.logits);
    out.embedding = embedding_head_.forward(pooled).row(0);
    if (cache) {
        cache->pooled = std::move(pooled);
        cache->valid = valid;
    }
    return out;
}

template <typename S>
void FusionModel<S>::backward(const Cache& cache, const nn::RowVec<S>& dlogits, const nn::RowVec<S>& dembedding) {
    nn::Mat<S> dpooled = class_head_.backward(cache.pooled, dlogits);
    dpooled += embedding_head_.backward(cache.pooled, dembedding);
    const auto T = static_cast<Eigen::Index>(cache.fused.mask.size());
    nn::Mat<S> dencoded(T, dpooled.cols());
    dencoded.rowwise() = dpooled.row(0) / static_cast<S>(cache.valid);
    nn::zero_masked_rows(dencoded, cache.fused.mask);

    nn::Mat<S> dcat = fused_.backward(cache.fused, dencoded);
    if (cfg_.arch == Architecture::Late) {
        const auto wa = static_cast<Eigen::Index>(cfg_.stream_a.d_model);
        const auto wb = static_cast<Eigen::Index>(cfg_.stream_b.d_model);
        const auto wc = static_cast<Eigen::Index>(cfg_.stream_c.d_model);
        enc_a_.backward(cache.a, dcat.leftCols(wa));
        enc_b_.backward(cache.b, dcat.middleCols(wa, wb));
        enc_c_.backward(cache.c, dcat.rightCols(wc));
    }
}

template <typename S>
nn::ParamList<S> FusionModel<S>::parameters() {
    nn::ParamList<S> out;
    if (cfg_.arch == Architecture::Late) {
        enc_a_.collect(out);
        enc_b_.collect(out);
        enc_c_.collect(out);
    }
    fused_.collect(out);
    class_head_.collect(out);
    embedding_head_.collect(out);
    return out;
}

template <typename S>
std::vector<const nn::Param<S>*> FusionModel<S>::parameters() const {
    auto mutable_list = const_cast<FusionModel<S>*>(this)->parameters();
    return {mutable_list.begin(), mutable_list.end()};
}

template <typename S>
void FusionModel<S>::zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
}

template <typename S>
std::size_t FusionModel<S>::parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += static_cast<std::size_t>(p->value.size());
    return n;
}

template class FusionModel<float>;
template class FusionModel<double>;

ProbabilityFn make_probability_fn(const FusionModel<float>& model, StreamToggles toggles) {
    return [&model, toggles](const StreamBatch& batch) {
        const auto out = [&] {
            if (toggles == StreamToggles{}) return model.forward(batch);
            StreamBatch copy = batch;
            apply_toggles(copy, toggles);
            return model.forward(copy);
        }();
        return std::vector<double>(out.class_probs.data(), out.class_probs.data() + out.class_probs.size());
    };
}

// ---------------------------------------------------------------- losses

std::vector<double> label_smooth(std::span<const double> onehot, double epsilon) {
    if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ConfigError("label smoothing rate must lie in [0,1)");
    if (onehot.empty()) throw ArgumentError("label_smooth on an empty vector");
    const double k = static_cast<double>(onehot.size());
    std::vector<double> out(onehot.size());
    for (std::size_t i = 0; i < onehot.size(); ++i) out[i] = (1.0 - epsilon) * onehot[i] + epsilon / k;
    return out;
}

std::vector<double> one_hot(std::size_t num_classes, std::size_t label) {
    if (label >= num_classes) throw ArgumentError("label out of range");
    std::vector<double> v(num_classes, 0.0);
    v[label] = 1.0;
    return v;
}

double cross_entropy(std::span<const double> probs, std::span<const double> target) {
    if (probs.size() != target.size()) throw ArgumentError("cross_entropy: size mismatch");
    double ce = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) ce -= target[i] * std::log(std::max(probs[i], kLogClamp));
    return ce;
}

double cosine_loss(std::span<const double> pred, std::span<const double> target) {
    if (pred.size() != target.size()) throw ArgumentError("cosine_loss: size mismatch");
    double dot = 0.0, np = 0.0, nt = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        dot += pred[i] * target[i];
        np += pred[i] * pred[i];
        nt += target[i] * target[i];
    }
    if (nt == 0.0) throw DegenerateInputError("cosine loss against a zero-norm embedding");
    if (np == 0.0) return 0.0;
    return -dot / (std::sqrt(np) * std::sqrt(nt));
}

double combined_loss(double ce, double cos, const LossWeights& w) {
    return w.class_weight * ce + w.embedding_weight * cos;
}

template <typename S>
nn::RowVec<S> softmax(const nn::RowVec<S>& logits) {
    const S mx = logits.maxCoeff();
    nn::RowVec<S> e = (logits.array() - mx).exp().matrix();
    return e / e.sum();
}

template <typename S>
LossGradient<S> class_loss_and_gradient(const nn::RowVec<S>& logits, const nn::RowVec<S>& probs,
                                        std::span<const double> target_probs, double class_weight) {
    const auto K = static_cast<std::size_t>(probs.size());
    if (target_probs.size() != K) throw ArgumentError("class target has the wrong size");
    (void)logits;
    LossGradient<S> g;
    std::vector<double> p(K), dp(K);
    for (std::size_t i = 0; i < K; ++i) p[i] = static_cast<double>(probs(static_cast<Eigen::Index>(i)));
    g.cross_entropy = cross_entropy(p, target_probs);
    double inner = 0.0;
    for (std::size_t i = 0; i < K; ++i) {
        dp[i] = p[i] > kLogClamp ? -target_probs[i] / p[i] : 0.0;
        inner += dp[i] * p[i];
    }
    g.dlogits.resize(static_cast<Eigen::Index>(K));
    for (std::size_t i = 0; i < K; ++i)
        g.dlogits(static_cast<Eigen::Index>(i)) = static_cast<S>(class_weight * p[i] * (dp[i] - inner));
    g.loss = class_weight * g.cross_entropy;
    return g;
}

template <typename S>
LossGradient<S> loss_and_gradient(const ForwardOutput<S>& out, std::span<const double> target_probs,
                                  std::span<const float> target_embedding, const LossWeights& w) {
    auto g = class_loss_and_gradient<S>(out.logits, out.class_probs, target_probs, w.class_weight);
    const auto E = static_cast<std::size_t>(out.embedding.size());
    if (target_embedding.size() != E) throw ArgumentError("embedding target has the wrong size");
    double dot = 0.0, np = 0.0, nt = 0.0;
    for (std::size_t i = 0; i < E; ++i) {
        const double e = static_cast<double>(out.embedding(static_cast<Eigen::Index>(i)));
        const double t = static_cast<double>(target_embedding[i]);
        dot += e * t;
        np += e * e;
        nt += t * t;
    }
    if (nt == 0.0) throw DegenerateInputError("cosine loss against a zero-norm embedding");
    const double pn = std::max(std::sqrt(np), kLogClamp);
    const double tn = std::sqrt(nt);
    const double cos = dot / (pn * tn);
    g.cosine = -cos;
    g.dembedding.resize(static_cast<Eigen::Index>(E));
    for (std::size_t i = 0; i < E; ++i) {
        const double e = static_cast<double>(out.embedding(static_cast<Eigen::Index>(i)));
        const double t = static_cast<double>(target_embedding[i]);
        const double dcos = t / (pn * tn) - cos * e / (pn * pn);
        g.dembedding(static_cast<Eigen::Index>(i)) = static_cast<S>(-w.embedding_weight * dcos);
    }
    g.loss = combined_loss(g.cross_entropy, g.cosine, w);
    return g;
}

template nn::RowVec<float> softmax<float>(const nn::RowVec<float>&);
template nn::RowVec<double> softmax<double>(const nn::RowVec<double>&);
template LossGradient<float> class_loss_and_gradient<float>(const nn::RowVec<float>&, const nn::RowVec<float>&,
                                                            std::span<const double>, double);
template LossGradient<double> class_loss_and_gradient<double>(const nn::RowVec<double>&, const nn::RowVec<double>&,
                                                              std::span<const double>, double);
template LossGradient<float> loss_and_gradient<float>(const ForwardOutput<float>&, std::span<const double>,
                                                      std::span<const float>, const LossWeights&);
template LossGradient<double> loss_and_gradient<double>(const ForwardOutput<double>&, std::span<const double>,
                                                        std::span<const float>, const LossWeights&);

// ---------------------------------------------------------------- checkpoint container

void write_checkpoint_file(const CheckpointFile& ckpt, const std::filesystem::path& path) {
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& t : ckpt.tensors) {
        if (t.data.size() != t.rows * t.cols) throw ArgumentError("tensor " + t.name + " has inconsistent shape");
        const std::size_t bytes = t.data.size() * sizeof(float);
        tensors.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"offset", offset}, {"length", bytes}});
        offset += bytes;
    }
    const nlohmann::json header = {{"config", ckpt.config}, {"meta", ckpt.meta}, {"tensors", tensors}};
    const std::string text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(4 + 8 + text.size() + offset);
    for (char c : kCheckpointMagic) out.push_back(static_cast<std::uint8_t>(c));
    const auto len = static_cast<std::uint64_t>(text.size());
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& t : ckpt.tensors)
        for (float v : t.data) {
            const auto bits = std::bit_cast<std::uint32_t>(v);
            for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
        }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open " + path.string());
    const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
    if (bytes.size() < 12 || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin(),
                                         [](char c, std::uint8_t b) { return static_cast<std::uint8_t>(c) == b; }))
        throw FormatError(path.string() + ": not a checkpoint file");
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(bytes[4 + i]) << (8 * i);
    if (len > bytes.size() - 12) throw FormatError(path.string() + ": truncated checkpoint header");
    CheckpointFile ckpt;
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(len));
        ckpt.config = header.at("config");
        ckpt.meta = header.value("meta", nlohmann::json::object());
        const std::size_t payload = 12 + len;
        for (const auto& t : header.at("tensors")) {
            TensorBlob blob;
            blob.name = t.at("name").get<std::string>();
            blob.rows = t.at("shape").at(0).get<std::size_t>();
            blob.cols = t.at("shape").at(1).get<std::size_t>();
            const auto offset = t.at("offset").get<std::size_t>();
            const auto length = t.at("length").get<std::size_t>();
            if (length != blob.rows * blob.cols * sizeof(float) || payload + offset + length > bytes.size())
                throw FormatError(path.string() + ": tensor " + blob.name + " out of bounds");
            blob.data.resize(blob.rows * blob.cols);
            for (std::size_t i = 0; i < blob.data.size(); ++i) {
                std::uint32_t bits = 0;
                const std::size_t at = payload + offset + 4 * i;
                for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[at + b]) << (8 * b);
                blob.data[i] = std::bit_cast<float>(bits);
            }
            ckpt.tensors.push_back(std::move(blob));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": malformed checkpoint header: " + e.what());
    }
    return ckpt;
}

template <typename S>
std::vector<TensorBlob> export_tensors(const std::vector<const nn::Param<S>*>& params) {
    std::vector<TensorBlob> out;
    out.reserve(params.size());
    for (const auto* p : params) {
        TensorBlob t{p->name, static_cast<std::size_t>(p->value.rows()), static_cast<std::size_t>(p->value.cols()), {}};
        t.data.resize(static_cast<std::size_t>(p->value.size()));
        for (Eigen::Index i = 0; i < p->value.size(); ++i)
            t.data[static_cast<std::size_t>(i)] = static_cast<float>(p->value.data()[i]);
        out.push_back(std::move(t));
    }
    return out;
}

template <typename S>
void import_tensors(const std::vector<TensorBlob>& blobs, const nn::ParamList<S>& params) {
    if (blobs.size() != params.size())
        throw FormatError("checkpoint holds " + std::to_string(blobs.size()) + " tensors, model expects " +
                          std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto* p = params[i];
        const auto& b = blobs[i];
        if (b.name != p->name || b.rows != static_cast<std::size_t>(p->value.rows()) ||
            b.cols != static_cast<std::size_t>(p->value.cols()))
            throw FormatError("checkpoint tensor " + b.name + " does not match model tensor " + p->name);
        for (std::size_t k = 0; k < b.data.size(); ++k) p->value.data()[k] = static_cast<S>(b.data[k]);
        p->zero_grad();
    }
}

template std::vector<TensorBlob> export_tensors<float>(const std::vector<const nn::Param<float>*>&);
template std::vector<TensorBlob> export_tensors<double>(const std::vector<const nn::Param<double>*>&);
template void import_tensors<float>(const std::vector<TensorBlob>&, const nn::ParamList<float>&);
template void import_tensors<double>(const std::vector<TensorBlob>&, const nn::ParamList<double>&);

void save_model(const FusionModel<float>& model, const nlohmann::json& meta, const std::filesystem::path& path) {
    CheckpointFile ckpt;
    ckpt.config = model.config().to_json();
    ckpt.meta = meta;
    ckpt.tensors = export_tensors<float>(model.parameters());
    write_checkpoint_file(ckpt, path);
}

FusionModel<float> load_model(const std::filesystem::path& path, nlohmann::json* meta) {
    auto ckpt = read_checkpoint_file(path);
    FusionModel<float> model(ModelConfig::from_json(ckpt.config));
    import_tensors<float>(ckpt.tensors, model.parameters());
    if (meta) *meta = ckpt.meta;
    return model;
}

}  // namespace slr
