#include "slr/run_config.hpp"

#include <cstdint>
#include <fstream>
#include <set>

#include "slr/errors.hpp"

namespace slr {

namespace {

using nlohmann::json;

// Reads the keys of one JSON object and complains about anything it was not asked for.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + "must be a JSON object");
    }

    bool has(const std::string& key) {
        known_.insert(key);
        return j_.contains(key);
    }

    template <typename T>
    void uint(const std::string& key, T& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_number_integer() || v.get<std::int64_t>() < 0) throw ConfigError(name(key) + " must be a non-negative integer");
        out = v.get<T>();
    }

    void real(const std::string& key, double& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_number()) throw ConfigError(name(key) + " must be a number");
        out = v.get<double>();
    }

    void boolean(const std::string& key, bool& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_boolean()) throw ConfigError(name(key) + " must be true or false");
        out = v.get<bool>();
    }

    void string(const std::string& key, std::string& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_string()) throw ConfigError(name(key) + " must be a string");
        out = v.get<std::string>();
    }

    const json& at(const std::string& key) const { return j_.at(key); }
    std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (const auto& [key, _] : j_.items())
            if (!known_.count(key)) throw ConfigError("unknown config key '" + name(key) + "'");
    }

private:
    std::string where() const { return path_.empty() ? "config " : "'" + path_ + "' "; }

    const json& j_;
    std::string path_;
    std::set<std::string> known_;
};

void read_train(const json& j, TrainConfig& t) {
    Section s(j, "train");
    s.real("learning_rate", t.learning_rate);
    s.real("weight_decay", t.weight_decay);
    s.uint("epochs", t.epochs);
    s.uint("batch_size", t.batch_size);
    s.real("label_smoothing", t.label_smoothing);
    s.real("class_loss_weight", t.loss_weights.class_weight);
    s.real("embedding_loss_weight", t.loss_weights.embedding_weight);
    s.uint("sequence_length", t.sequence_length);
    s.uint("eval_seed", t.eval_seed);
    if (s.has("streams")) {
        Section st(s.at("streams"), "train.streams");
        st.boolean("A", t.streams.a);
        st.boolean("B", t.streams.b);
        st.boolean("C", t.streams.c);
        st.finish();
    }
    s.finish();
}

void read_ga(const json& j, GAConfig& g, std::size_t& budget) {
    Section s(j, "ga");
    s.uint("population_size", g.population_size);
    s.uint("generations", g.generations);
    s.uint("parents_per_generation", g.parents_per_generation);
    s.real("layer_gene_mutation_rate", g.layer_gene_mutation_rate);
    s.real("neuron_gene_mutation_rate", g.neuron_gene_mutation_rate);
    s.real("immigrant_probability", g.immigrant_probability);
    s.uint("budget_epochs", budget);
    s.finish();
}

void read_ensemble(const json& j, EnsembleTrainConfig& e, Chromosome& chromosome) {
    Section s(j, "ensemble");
    s.real("learning_rate", e.learning_rate);
    s.real("weight_decay", e.weight_decay);
    s.uint("epochs", e.epochs);
    s.uint("batch_size", e.batch_size);
    s.real("label_smoothing", e.label_smoothing);
    s.real("class_loss_weight", e.class_weight);
    s.uint("sequence_length", e.sequence_length);
    s.uint("eval_seed", e.eval_seed);
    std::string text;
    s.string("chromosome", text);
    if (!text.empty()) {
        try {
            chromosome = Chromosome::parse(text);
        } catch (const InvalidChromosomeError& err) {
            throw ConfigError(std::string("ensemble.chromosome: ") + err.what());
        }
    }
    s.finish();
}

void read_decode(const json& j, DecodeConfig& d) {
    Section s(j, "decode");
    s.uint("window", d.window);
    s.uint("step", d.step);
    s.real("threshold", d.threshold);
    s.uint("padding_seed", d.padding_seed);
    s.finish();
}

}  // namespace

void RunConfig::set_seed(std::uint64_t s) {
    seed = s;
    train.seed = s;
    ga.seed = s;
    ensemble.seed = s;
}

void RunConfig::validate() const {
    train.validate();
    ga.validate();
    if (ga_budget_epochs < 1) throw ConfigError("ga.budget_epochs must be at least 1");
    ensemble.validate();
    chromosome.validate();
    decode.validate();
}

nlohmann::json RunConfig::to_json() const {
    auto t = train.to_json();
    t.erase("seed");
    auto g = ga.to_json();
    g.erase("seed");
    g["budget_epochs"] = ga_budget_epochs;
    auto e = ensemble.to_json();
    e.erase("seed");
    e["chromosome"] = chromosome.to_string();
    return {{"seed", seed},
            {"data", data},
            {"arch", slr::to_string(arch)},
            {"train", t},
            {"ga", g},
            {"ensemble", e},
            {"decode",
             {{"window", decode.window},
              {"step", decode.step},
              {"threshold", decode.threshold},
              {"padding_seed", decode.padding_seed}}}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig c;
    Section s(j, "");
    std::uint64_t seed = 0;
    s.uint("seed", seed);
    s.string("data", c.data);
    std::string arch = slr::to_string(c.arch);
    s.string("arch", arch);
    c.arch = architecture_from_string(arch);
    if (s.has("train")) read_train(s.at("train"), c.train);
    if (s.has("ga")) read_ga(s.at("ga"), c.ga, c.ga_budget_epochs);
    if (s.has("ensemble")) read_ensemble(s.at("ensemble"), c.ensemble, c.chromosome);
    if (s.has("decode")) read_decode(s.at("decode"), c.decode);
    s.finish();
    c.set_seed(seed);
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return from_json(j);
}

}  // namespace slr
