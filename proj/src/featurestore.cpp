#include "slr/featurestore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <cstdio>
#include <iterator>
#include <map>
#include <numbers>
#include <random>
#include <set>

#include "slr/errors.hpp"

namespace slr {

namespace {

constexpr std::array<char, 4> kMagic = {'S', 'L', 'F', '1'};
constexpr std::uint32_t kNoLabel = 0xFFFFFFFFu;
constexpr std::uint16_t kFlagLabel = 0x1;
constexpr std::size_t kHeaderBytes = 4 + 2 + 2 + 4 + 4 + 4;
constexpr std::size_t kFrameBytes = kFrameDim * 4 + 2 * (1 + 4 + 4);

class ByteWriter {
public:
    explicit ByteWriter(std::vector<std::uint8_t>& out) : out_(out) {}

    void u8(std::uint8_t v) { out_.push_back(v); }
    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

private:
    std::vector<std::uint8_t>& out_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

    std::uint8_t u8() {
        need(1);
        return in_[pos_++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(in_[pos_] | (in_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::size_t remaining() const { return in_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) throw CorruptRecordError("record truncated");
    }

    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

template <std::size_t N>
void write_floats(ByteWriter& w, const std::array<float, N>& a) {
    for (float v : a) w.f32(v);
}

template <std::size_t N>
void read_floats(ByteReader& r, std::array<float, N>& a) {
    for (float& v : a) v = r.f32();
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << text;
}

bool in_unit_square(const HandCenter& c) {
    return c.cx >= 0.0f && c.cx <= 1.0f && c.cy >= 0.0f && c.cy <= 1.0f;
}

}  // namespace

std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "train";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw FormatError("unknown split tag '" + s + "'");
}

void DatasetManifest::validate() const {
    if (classes.empty()) throw ConfigError("manifest has no classes");
    std::array<std::set<std::uint32_t>, 3> signers;
    for (const auto& r : records) {
        if (r.label_id >= classes.size())
            throw ConfigError("record " + r.path + " has label " + std::to_string(r.label_id) +
                              " outside the class table");
        signers[static_cast<std::size_t>(r.split)].insert(r.signer_id);
    }
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = a + 1; b < 3; ++b)
            for (auto s : signers[a])
                if (signers[b].contains(s))
                    throw ConfigError("signer " + std::to_string(s) + " appears in splits " +
                                      to_string(static_cast<Split>(a)) + " and " +
                                      to_string(static_cast<Split>(b)));
}

void EmbeddingTable::validate(std::size_t num_classes) const {
    if (vectors.size() < num_classes)
        throw FormatError("embedding table covers " + std::to_string(vectors.size()) + " of " +
                          std::to_string(num_classes) + " classes");
    for (std::size_t k = 0; k < vectors.size(); ++k) {
        const auto& v = vectors[k];
        if (v.size() != kEmbeddingDim)
            throw FormatError("embedding for class " + std::to_string(k) + " has dimension " +
                              std::to_string(v.size()));
        if (std::all_of(v.begin(), v.end(), [](float x) { return x == 0.0f; }))
            throw FormatError("embedding for class " + std::to_string(k) + " is all-zero");
    }
}

std::vector<const FeatureSequence*> Dataset::split(Split s) const {
    std::vector<const FeatureSequence*> out;
    for (std::size_t i = 0; i < records.size(); ++i)
        if (manifest.records[i].split == s) out.push_back(&records[i]);
    return out;
}

std::vector<std::uint8_t> encode_record(const FeatureSequence& seq) {
    if (seq.frames.empty()) throw ArgumentError("cannot encode an empty sequence");
    std::vector<std::uint8_t> out;
    out.reserve(kHeaderBytes + seq.frames.size() * kFrameBytes);
    ByteWriter w(out);
    for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
    w.u16(kRecordFormatVersion);
    w.u16(seq.label_id ? kFlagLabel : 0);
    w.u32(static_cast<std::uint32_t>(seq.frames.size()));
    w.u32(seq.label_id.value_or(kNoLabel));
    w.u32(seq.signer_id);
    for (const auto& f : seq.frames) {
        write_floats(w, f.hand_shape);
        write_floats(w, f.arm_points);
        write_floats(w, f.lip_shape);
        for (const auto& c : f.hand_centers) {
            w.u8(c ? 1 : 0);
            w.f32(c ? c->cx : 0.0f);
            w.f32(c ? c->cy : 0.0f);
        }
    }
    return out;
}

FeatureSequence decode_record(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    if (bytes.size() < kMagic.size()) throw CorruptRecordError("record too short for magic");
    for (char c : kMagic)
        if (r.u8() != static_cast<std::uint8_t>(c)) throw CorruptRecordError("bad magic bytes");
    const auto version = r.u16();
    if (version != kRecordFormatVersion)
        throw CorruptRecordError("unsupported record version " + std::to_string(version));
    const auto flags = r.u16();
    const auto count = r.u32();
    const auto label = r.u32();
    FeatureSequence seq;
    seq.signer_id = r.u32();
    if (count == 0) throw CorruptRecordError("record has zero frames");
    if (flags & kFlagLabel) {
        if (label == kNoLabel) throw CorruptRecordError("label flag set without a label");
        seq.label_id = label;
    }
    if (r.remaining() != static_cast<std::size_t>(count) * kFrameBytes)
        throw CorruptRecordError("payload size does not match frame count");
    seq.frames.resize(count);
    for (auto& f : seq.frames) {
        read_floats(r, f.hand_shape);
        read_floats(r, f.arm_points);
        read_floats(r, f.lip_shape);
        for (auto& c : f.hand_centers) {
            const auto present = r.u8();
            HandCenter hc{r.f32(), r.f32()};
            if (present > 1) throw CorruptRecordError("bad presence byte");
            if (present) c = hc;
        }
    }
    return seq;
}

void save_record(const FeatureSequence& seq, const std::filesystem::path& path) {
    for (const auto& f : seq.frames)
        for (const auto& c : f.hand_centers)
            if (c && !in_unit_square(*c)) throw ArgumentError("hand center outside [0,1]^2");
    const auto bytes = encode_record(seq);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

FeatureSequence load_record(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    try {
        return decode_record(bytes);
    } catch (const CorruptRecordError& e) {
        throw CorruptRecordError(path.string() + ": " + e.what());
    }
}

nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json classes = nlohmann::json::array();
    for (std::size_t k = 0; k < m.classes.size(); ++k)
        classes.push_back({{"id", k}, {"gloss", m.classes[k]}});
    nlohmann::json records = nlohmann::json::array();
    for (const auto& r : m.records)
        records.push_back({{"path", r.path},
                           {"signer", r.signer_id},
                           {"label", r.label_id},
                           {"split", to_string(r.split)}});
    return {{"classes", classes},
            {"records", records},
            {"embeddings", m.embeddings_path},
            {"dims",
             {{"hand_shape", kHandShapeDim},
              {"arm_points", kArmPointsDim},
              {"lip_shape", kLipShapeDim},
              {"embedding", kEmbeddingDim}}}};
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
        const auto& classes = j.at("classes");
        m.classes.resize(classes.size());
        std::vector<bool> seen(classes.size(), false);
        for (const auto& c : classes) {
            const auto id = c.at("id").get<std::size_t>();
            if (id >= classes.size() || seen[id]) throw FormatError("class ids are not dense 0..K-1");
            seen[id] = true;
            m.classes[id] = c.at("gloss").get<std::string>();
        }
        for (const auto& r : j.at("records"))
            m.records.push_back({r.at("path").get<std::string>(), r.at("signer").get<std::uint32_t>(),
                                 r.at("label").get<std::uint32_t>(),
                                 split_from_string(r.at("split").get<std::string>())});
        m.embeddings_path = j.at("embeddings").get<std::string>();
        if (j.contains("dims")) {
            const auto& d = j.at("dims");
            if (d.at("hand_shape").get<std::size_t>() != kHandShapeDim ||
                d.at("arm_points").get<std::size_t>() != kArmPointsDim ||
                d.at("lip_shape").get<std::size_t>() != kLipShapeDim ||
                d.at("embedding").get<std::size_t>() != kEmbeddingDim)
                throw FormatError("manifest feature dimensions do not match this build");
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed manifest: ") + e.what());
    }
    return m;
}

nlohmann::json embeddings_to_json(const EmbeddingTable& t) {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t k = 0; k < t.vectors.size(); ++k) j[std::to_string(k)] = t.vectors[k];
    return j;
}

EmbeddingTable embeddings_from_json(const nlohmann::json& j) {
    EmbeddingTable t;
    try {
        t.vectors.resize(j.size());
        for (const auto& [key, value] : j.items()) {
            std::size_t pos = 0;
            const auto id = std::stoul(key, &pos);
            if (pos != key.size() || id >= j.size()) throw FormatError("bad embedding key '" + key + "'");
            t.vectors[id] = value.get<std::vector<float>>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed embedding table: ") + e.what());
    } catch (const std::logic_error&) {
        throw FormatError("malformed embedding table key");
    }
    return t;
}

std::filesystem::path write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    if (ds.records.size() != ds.manifest.records.size())
        throw ArgumentError("dataset records and manifest entries differ in count");
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        const auto path = dir / ds.manifest.records[i].path;
        std::filesystem::create_directories(path.parent_path());
        save_record(ds.records[i], path);
    }
    write_text(dir / ds.manifest.embeddings_path, embeddings_to_json(ds.embeddings).dump() + "\n");
    const auto manifest_path = dir / "manifest.json";
    write_text(manifest_path, manifest_to_json(ds.manifest).dump(2) + "\n");
    return manifest_path;
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
    Dataset ds;
    ds.manifest = manifest_from_json(read_json(manifest_path));
    ds.manifest.validate();
    const auto base = manifest_path.parent_path();
    ds.embeddings = embeddings_from_json(read_json(base / ds.manifest.embeddings_path));
    ds.embeddings.validate(ds.manifest.num_classes());
    ds.records.reserve(ds.manifest.records.size());
    for (const auto& entry : ds.manifest.records) {
        auto seq = load_record(base / entry.path);
        if (seq.label_id != entry.label_id || seq.signer_id != entry.signer_id)
            throw FormatError(entry.path + ": record header disagrees with manifest");
        seq.gloss = ds.manifest.classes[entry.label_id];
        ds.records.push_back(std::move(seq));
    }
    return ds;
}

namespace {

constexpr std::size_t kAnchors = 4;
constexpr double kStaticAmplitude = 0.5;
constexpr double kMotionAmplitude = 0.25;
constexpr double kSignerOffsetSigma = 0.05;
constexpr double kCenterOrbit = 0.08;
constexpr double kHandDropoutChance = 0.3;  // per class and hand
constexpr double kHandDropoutSpan = 0.15;   // fraction of the sign

struct HandTrack {
    double base_x, base_y, freq, phase;
    // Normalized-time interval during which the hand leaves the frame; empty when begin >= end.
    double drop_begin, drop_end;
};

struct ClassPrototype {
    std::vector<double> static_part;               // kFrameDim
    std::vector<std::vector<double>> anchors;      // kAnchors x kFrameDim
    std::array<HandTrack, 2> hands;
};

ClassPrototype draw_prototype(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(-0.5, 0.5);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    ClassPrototype p;
    p.static_part.resize(kFrameDim);
    for (auto& v : p.static_part) v = 2.0 * kStaticAmplitude * unit(rng);
    p.anchors.assign(kAnchors, std::vector<double>(kFrameDim));
    for (auto& a : p.anchors)
        for (auto& v : a) v = 2.0 * kMotionAmplitude * unit(rng);
    for (std::size_t h = 0; h < 2; ++h) {
        auto& t = p.hands[h];
        t.base_x = (h == 0 ? 0.2 : 0.55) + 0.25 * u01(rng);
        t.base_y = 0.3 + 0.4 * u01(rng);
        t.freq = 0.5 + u01(rng);
        t.phase = u01(rng);
        const bool drops = u01(rng) < kHandDropoutChance;
        const double begin = u01(rng) * (1.0 - kHandDropoutSpan);
        t.drop_begin = begin;
        t.drop_end = drops ? begin + kHandDropoutSpan : begin;
    }
    return p;
}

FeatureSequence render_record(const ClassPrototype& proto, const std::vector<double>& signer_offset,
                              std::size_t length, double sigma, std::mt19937_64& rng) {
    std::normal_distribution<double> noise(0.0, 1.0);
    FeatureSequence seq;
    seq.frames.resize(length);
    std::vector<double> frame(kFrameDim);
    for (std::size_t t = 0; t < length; ++t) {
        const double tau = length > 1 ? static_cast<double>(t) / static_cast<double>(length - 1) : 0.0;
        const double pos = tau * static_cast<double>(kAnchors - 1);
        const auto lo = std::min(static_cast<std::size_t>(pos), kAnchors - 2);
        const double w = pos - static_cast<double>(lo);
        for (std::size_t d = 0; d < kFrameDim; ++d)
            frame[d] = proto.static_part[d] + (1.0 - w) * proto.anchors[lo][d] +
                       w * proto.anchors[lo + 1][d] + signer_offset[d];
        if (sigma > 0.0)
            for (auto& v : frame) v += sigma * noise(rng);

        auto& out = seq.frames[t];
        std::size_t d = 0;
        for (auto& v : out.hand_shape) v = static_cast<float>(frame[d++]);
        for (auto& v : out.arm_points) v = static_cast<float>(frame[d++]);
        for (auto& v : out.lip_shape) v = static_cast<float>(frame[d++]);

        for (std::size_t h = 0; h < 2; ++h) {
            const auto& track = proto.hands[h];
            if (tau >= track.drop_begin && tau < track.drop_end) {
                std::fill_n(out.hand_shape.begin() + static_cast<std::ptrdiff_t>(h * kHandShapePerHand),
                            kHandShapePerHand, 0.0f);
                continue;
            }
            const double angle = 2.0 * std::numbers::pi * (track.freq * tau + track.phase);
            double cx = track.base_x + kCenterOrbit * std::sin(angle);
            double cy = track.base_y + kCenterOrbit * std::cos(angle);
            if (sigma > 0.0) {
                cx += 0.2 * sigma * noise(rng);
                cy += 0.2 * sigma * noise(rng);
            }
            out.hand_centers[h] = HandCenter{static_cast<float>(std::clamp(cx, 0.0, 1.0)),
                                             static_cast<float>(std::clamp(cy, 0.0, 1.0))};
        }
    }
    return seq;
}

}  // namespace

Dataset generate_synthetic_dataset(const SynthParams& p) {
    if (p.n_classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
    if (p.n_signers < 1 || p.n_per_signer_class < 1) throw ConfigError("synthetic dataset would be empty");
    if (p.min_length < 1 || p.max_length > 200 || p.min_length > p.max_length)
        throw ConfigError("length range must lie within [1, 200]");
    if (p.noise_sigma < 0.0) throw ConfigError("noise sigma must be non-negative");
    if (p.split_by_signer && p.n_signers < 3)
        throw ConfigError("a signer-disjoint split needs at least 3 signers");

    std::mt19937_64 rng(p.seed);
    std::vector<ClassPrototype> protos;
    protos.reserve(p.n_classes);
    for (std::size_t k = 0; k < p.n_classes; ++k) protos.push_back(draw_prototype(rng));

    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<std::vector<double>> signer_offsets(p.n_signers, std::vector<double>(kFrameDim));
    for (auto& off : signer_offsets)
        for (auto& v : off) v = kSignerOffsetSigma * gauss(rng);

    std::vector<std::uint32_t> order(p.n_signers);
    for (std::size_t s = 0; s < p.n_signers; ++s) order[s] = static_cast<std::uint32_t>(s);
    std::vector<Split> signer_split(p.n_signers, Split::Train);
    if (p.split_by_signer) {
        std::shuffle(order.begin(), order.end(), rng);
        signer_split[order[p.n_signers - 2]] = Split::Val;
        signer_split[order[p.n_signers - 1]] = Split::Test;
    }

    Dataset ds;
    for (std::size_t k = 0; k < p.n_classes; ++k) {
        char gloss[32];
        std::snprintf(gloss, sizeof gloss, "word_%03zu", k);
        ds.manifest.classes.emplace_back(gloss);
    }

    std::uniform_int_distribution<std::size_t> length_dist(p.min_length, p.max_length);
    for (std::size_t s = 0; s < p.n_signers; ++s) {
        for (std::size_t k = 0; k < p.n_classes; ++k) {
            for (std::size_t i = 0; i < p.n_per_signer_class; ++i) {
                const auto length = length_dist(rng);
                auto seq = render_record(protos[k], signer_offsets[s], length, p.noise_sigma, rng);
                seq.label_id = static_cast<std::uint32_t>(k);
                seq.signer_id = static_cast<std::uint32_t>(s);
                seq.gloss = ds.manifest.classes[k];
                char path[64];
                std::snprintf(path, sizeof path, "records/s%02zu_c%03zu_%02zu.slf", s, k, i);
                ds.manifest.records.push_back({path, seq.signer_id, *seq.label_id, signer_split[s]});
                ds.records.push_back(std::move(seq));
            }
        }
    }

    ds.embeddings.vectors.resize(p.n_classes);
    for (auto& v : ds.embeddings.vectors) {
        std::vector<double> raw(kEmbeddingDim);
        double norm = 0.0;
        for (auto& x : raw) {
            x = gauss(rng);
            norm += x * x;
        }
        norm = std::sqrt(norm);
        v.resize(kEmbeddingDim);
        for (std::size_t d = 0; d < kEmbeddingDim; ++d) v[d] = static_cast<float>(raw[d] / norm);
    }
    return ds;
}

Sentence concat_sentence(std::span<const FeatureSequence* const> records) {
    if (records.empty()) throw ArgumentError("cannot build a sentence from zero records");
    Sentence out;
    out.sequence.signer_id = records.front()->signer_id;
    for (const auto* r : records) {
        if (!r->label_id) throw ArgumentError("sentence words must be labelled");
        out.reference.push_back(*r->label_id);
        out.sequence.frames.insert(out.sequence.frames.end(), r->frames.begin(), r->frames.end());
    }
    return out;
}

Sentence concat_sentence(std::span<const FeatureSequence> records) {
    std::vector<const FeatureSequence*> ptrs;
    ptrs.reserve(records.size());
    for (const auto& r : records) ptrs.push_back(&r);
    return concat_sentence(std::span<const FeatureSequence* const>(ptrs));
}

DatasetManifest split_by_signer(DatasetManifest manifest, const std::vector<std::uint32_t>& train_ids,
                                const std::vector<std::uint32_t>& val_ids,
                                const std::vector<std::uint32_t>& test_ids) {
    std::map<std::uint32_t, Split> assignment;
    auto assign = [&](const std::vector<std::uint32_t>& ids, Split s) {
        for (auto id : ids) {
            auto [it, inserted] = assignment.emplace(id, s);
            if (!inserted)
                throw ConfigError("signer " + std::to_string(id) + " assigned to both " +
                                  to_string(it->second) + " and " + to_string(s));
        }
    };
    assign(train_ids, Split::Train);
    assign(val_ids, Split::Val);
    assign(test_ids, Split::Test);
    for (auto& r : manifest.records) {
        auto it = assignment.find(r.signer_id);
        if (it == assignment.end())
            throw ConfigError("signer " + std::to_string(r.signer_id) + " is not assigned to any split");
        r.split = it->second;
    }
    return manifest;
}

}  // namespace slr
