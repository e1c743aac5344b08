// slr: synthetic data, training, GA search, ensembling, evaluation and continuous decoding.
//
// Exit codes: 0 ok, 1 configuration error, 2 data/format error, 3 anything else.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "slr/decoder.hpp"
#include "slr/ensemble_ga.hpp"
#include "slr/errors.hpp"
#include "slr/featurestore.hpp"
#include "slr/metrics.hpp"
#include "slr/model.hpp"
#include "slr/run_config.hpp"
#include "slr/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace slr;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

StreamToggles parse_streams(const std::string& text) {
    StreamToggles t{false, false, false};
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item == "A") t.a = true;
        else if (item == "B") t.b = true;
        else if (item == "C") t.c = true;
        else throw ConfigError("unknown stream '" + item + "' (expected A, B or C)");
    }
    if (!t.a && !t.b && !t.c) throw ConfigError("--streams enables nothing");
    return t;
}

StreamToggles streams_from_meta(const json& meta) {
    StreamToggles t;
    if (!meta.contains("streams")) return t;
    const auto& s = meta.at("streams");
    t.a = s.value("A", true);
    t.b = s.value("B", true);
    t.c = s.value("C", true);
    return t;
}

// Options shared by every command that reads a run config.
struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string data;

    RunConfig resolve() const {
        RunConfig rc = config.empty() ? RunConfig{} : RunConfig::load(config);
        if (seed) rc.set_seed(*seed);
        if (!data.empty()) rc.data = data;
        return rc;
    }
};

void add_common(CLI::App* cmd, Common& c, bool needs_data) {
    cmd->add_option("--config", c.config, "JSON run config");
    cmd->add_option("--seed", c.seed, "overrides the config seed");
    if (needs_data) cmd->add_option("--data", c.data, "dataset manifest.json (or set \"data\" in the config)");
}

Dataset load_data(const RunConfig& rc) {
    if (rc.data.empty()) throw ConfigError("no dataset given (--data or \"data\" in the config)");
    return load_dataset(rc.data);
}

// A single base model or the full two-model ensemble, kept alive alongside its ProbabilityFn.
struct Recognizer {
    std::unique_ptr<FusionModel<float>> single, early, late;
    std::unique_ptr<EnsembleCheckpoint> head;
    ProbabilityFn fn;
    std::size_t num_classes = 0;
};

struct ModelArgs {
    std::string model, early, late, ensemble;
};

void add_model_args(CLI::App* cmd, ModelArgs& m) {
    cmd->add_option("--model", m.model, "single base-model checkpoint");
    cmd->add_option("--early", m.early, "early-fusion checkpoint");
    cmd->add_option("--late", m.late, "late-fusion checkpoint");
    cmd->add_option("--ensemble", m.ensemble, "ensemble head checkpoint (needs --early and --late)");
}

Recognizer load_recognizer(const ModelArgs& m) {
    Recognizer r;
    if (!m.model.empty()) {
        if (!m.early.empty() || !m.late.empty() || !m.ensemble.empty())
            throw ConfigError("--model excludes --early/--late/--ensemble");
        json meta;
        r.single = std::make_unique<FusionModel<float>>(load_model(m.model, &meta));
        r.fn = make_probability_fn(*r.single, streams_from_meta(meta));
        r.num_classes = r.single->config().num_classes;
        return r;
    }
    if (m.early.empty() || m.late.empty() || m.ensemble.empty())
        throw ConfigError("give either --model, or all of --early, --late and --ensemble");
    r.early = std::make_unique<FusionModel<float>>(load_model(m.early));
    r.late = std::make_unique<FusionModel<float>>(load_model(m.late));
    r.head = std::make_unique<EnsembleCheckpoint>(load_ensemble(m.ensemble));
    r.num_classes = r.head->head.num_classes();
    if (r.early->config().num_classes != r.num_classes || r.late->config().num_classes != r.num_classes)
        throw ConfigError("ensemble and base models disagree on the class count");
    r.fn = make_ensemble_fn(*r.early, *r.late, r.head->head);
    return r;
}

// --------------------------------------------------------------------------

struct SynthArgs {
    SynthParams p;
    std::string out;
};

void cmd_synth(const SynthArgs& a) {
    const auto ds = generate_synthetic_dataset(a.p);
    const auto manifest = write_dataset(ds, a.out);
    std::cerr << "wrote " << ds.records.size() << " records, manifest " << manifest.string() << "\n";
}

struct TrainArgs {
    Common common;
    std::string arch, out, streams;
    std::optional<std::size_t> epochs;
};

void cmd_train(const TrainArgs& a) {
    auto rc = a.common.resolve();
    if (!a.arch.empty()) rc.arch = architecture_from_string(a.arch);
    if (!a.streams.empty()) rc.train.streams = parse_streams(a.streams);
    if (a.epochs) rc.train.epochs = *a.epochs;
    rc.validate();
    const auto ds = load_data(rc);
    const auto mc = rc.arch == Architecture::Early ? ModelConfig::early_default(ds.num_classes())
                                                   : ModelConfig::late_default(ds.num_classes());
    const fs::path out(a.out);
    fs::create_directories(out);
    write_json(out / "train_config.json", {{"run", rc.to_json()}, {"train", rc.train.to_json()}, {"model", mc.to_json()}});
    std::cerr << "train config " << rc.train.to_json().dump() << "\n";

    std::ofstream log(out / "train_log.jsonl", std::ios::binary);
    if (!log) throw ConfigError("cannot write " + (out / "train_log.jsonl").string());
    const auto result = train_model(ds, mc, rc.train, &log);
    auto meta = result.best.meta();
    meta["streams"] = {{"A", rc.train.streams.a}, {"B", rc.train.streams.b}, {"C", rc.train.streams.c}};
    save_model(result.best.model, meta, out / "model.slrc");
    std::cerr << "best epoch " << result.best.epoch << " val top1 " << result.best.val_top1 << "\n";
}

struct GaArgs {
    Common common;
    std::string early, late, out;
    std::optional<std::size_t> budget, generations, population;
};

void cmd_ga(const GaArgs& a) {
    auto rc = a.common.resolve();
    if (a.budget) rc.ga_budget_epochs = *a.budget;
    if (a.generations) rc.ga.generations = *a.generations;
    if (a.population) rc.ga.population_size = *a.population;
    if (rc.ga.parents_per_generation > rc.ga.population_size) rc.ga.parents_per_generation = rc.ga.population_size;
    rc.validate();
    const auto ds = load_data(rc);
    const auto early = load_model(a.early);
    const auto late = load_model(a.late);
    const auto train = cache_base_outputs(early, late, ds.split(Split::Train), rc.ensemble.sequence_length,
                                          rc.ensemble.eval_seed);
    const auto val = cache_base_outputs(early, late, ds.split(Split::Val), rc.ensemble.sequence_length,
                                        rc.ensemble.eval_seed);
    auto ecfg = rc.ensemble;
    ecfg.epochs = rc.ga_budget_epochs;
    const FitnessFn fit = [&](const Chromosome& c, std::uint64_t eval_seed) {
        auto cfg = ecfg;
        cfg.seed = eval_seed;
        return fitness(100.0 * train_ensemble(train, val, c, ds.num_classes(), cfg).val_top1);
    };
    const fs::path out(a.out);
    fs::create_directories(out);
    std::ofstream log(out / "ga_history.jsonl", std::ios::binary);
    if (!log) throw ConfigError("cannot write " + (out / "ga_history.jsonl").string());
    const auto result = run_ga(fit, rc.ga, &log);
    write_json(out / "ga_best.json", {{"chromosome", result.best.to_string()},
                                      {"fitness", result.best_fitness},
                                      {"ga", rc.ga.to_json()},
                                      {"budget_epochs", rc.ga_budget_epochs}});
    std::cerr << "best chromosome " << result.best.to_string() << "\n";
}

struct EnsembleArgs {
    Common common;
    std::string early, late, chromosome, out;
    std::optional<std::size_t> epochs;
};

void cmd_ensemble(const EnsembleArgs& a) {
    auto rc = a.common.resolve();
    if (!a.chromosome.empty()) rc.chromosome = Chromosome::parse(a.chromosome);
    if (a.epochs) rc.ensemble.epochs = *a.epochs;
    rc.validate();
    const auto ds = load_data(rc);
    const auto early = load_model(a.early);
    const auto late = load_model(a.late);
    const auto ckpt = train_ensemble(early, late, rc.chromosome, ds, rc.ensemble);
    const fs::path out(a.out);
    fs::create_directories(out);
    save_ensemble(ckpt, out / "ensemble.slrc");
    write_json(out / "ensemble_meta.json", {{"chromosome", ckpt.chromosome.to_string()},
                                            {"epoch", ckpt.epoch},
                                            {"val_top1", ckpt.val_top1},
                                            {"val_top5", ckpt.val_top5},
                                            {"val_nll", ckpt.val_nll},
                                            {"config", rc.ensemble.to_json()}});
    std::cerr << "ensemble epoch " << ckpt.epoch << " val top1 " << ckpt.val_top1 << "\n";
}

struct EvalArgs {
    Common common;
    ModelArgs models;
    std::string split = "test", out, timing;
};

void cmd_eval(const EvalArgs& a) {
    auto rc = a.common.resolve();
    rc.validate();
    const auto ds = load_data(rc);
    const auto rec = load_recognizer(a.models);
    if (rec.num_classes != ds.num_classes()) throw ConfigError("model and dataset disagree on the class count");
    const auto records = ds.split(split_from_string(a.split));
    const auto r = evaluate(rec.fn, records, ds.num_classes(), rc.train.sequence_length, rc.train.eval_seed);
    auto j = r.to_json();
    j["split"] = a.split;
    j["records"] = records.size();
    write_json(a.out, j);
    std::cerr << a.split << " top1 " << r.top1 << " top5 " << r.top5 << " latency " << r.mean_latency_ms << " ms\n";
    if (!a.timing.empty()) write_json(a.timing, {{"mean_latency_ms", r.mean_latency_ms}});
}

struct SentenceArgs {
    Common common;
    std::size_t count = 20, min_words = 2, max_words = 5;
    std::string split = "test", out;
};

void cmd_sentences(const SentenceArgs& a) {
    auto rc = a.common.resolve();
    rc.validate();
    if (a.count < 1) throw ConfigError("--count must be at least 1");
    if (a.min_words < 1 || a.min_words > a.max_words) throw ConfigError("need 1 <= --min-words <= --max-words");
    const auto ds = load_data(rc);
    const auto pool = ds.split(split_from_string(a.split));
    std::set<std::uint32_t> classes;
    for (const auto* r : pool) classes.insert(*r->label_id);
    if (a.max_words > classes.size())
        throw ConfigError("--max-words exceeds the " + std::to_string(classes.size()) + " classes in the split");

    std::mt19937_64 rng(rc.seed ^ 0x5E47E4CEull);
    const fs::path out(a.out);
    fs::create_directories(out);
    json listing = json::array();
    for (std::size_t s = 0; s < a.count; ++s) {
        const auto n = std::uniform_int_distribution<std::size_t>(a.min_words, a.max_words)(rng);
        std::vector<const FeatureSequence*> words;
        std::set<std::uint32_t> used;
        while (words.size() < n) {
            const auto* r = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
            if (used.insert(*r->label_id).second) words.push_back(r);
        }
        auto sentence = concat_sentence(std::span<const FeatureSequence* const>(words));
        char name[32];
        std::snprintf(name, sizeof name, "sentence_%03zu.slf", s);
        save_record(sentence.sequence, out / name);
        listing.push_back({{"path", name}, {"reference", sentence.reference}, {"frames", sentence.sequence.length()}});
    }
    write_json(out / "sentences.json", {{"sentences", listing}});
    std::cerr << "wrote " << a.count << " sentences to " << out.string() << "\n";
}

struct DecodeArgs {
    Common common;
    ModelArgs models;
    std::string sentences, out;
    std::optional<std::size_t> window, step;
    std::optional<double> threshold;
};

void cmd_decode(const DecodeArgs& a) {
    auto rc = a.common.resolve();
    if (a.window) rc.decode.window = *a.window;
    if (a.step) rc.decode.step = *a.step;
    if (a.threshold) rc.decode.threshold = *a.threshold;
    rc.validate();
    const auto rec = load_recognizer(a.models);
    const fs::path dir(a.sentences);
    const auto listing = read_json(dir / "sentences.json");

    std::vector<SentenceDecode> decodes;
    std::vector<std::vector<std::uint32_t>> references;
    json traces = json::array();
    try {
        for (const auto& item : listing.at("sentences")) {
            const auto seq = load_record(dir / item.at("path").get<std::string>());
            const auto trace = decode(rec.fn, seq, rc.decode);
            decodes.push_back(trace.summary());
            references.push_back(item.at("reference").get<std::vector<std::uint32_t>>());
            auto t = trace.to_json();
            t["path"] = item.at("path");
            traces.push_back(std::move(t));
        }
    } catch (const json::exception& e) {
        throw FormatError("malformed sentences.json: " + std::string(e.what()));
    }
    const auto report = sentence_report(decodes, references);
    const fs::path out(a.out);
    fs::create_directories(out);
    write_json(out / "decode_report.json", {{"report", report.to_json()}, {"traces", traces}});
    write_text(out / "decode_report.txt", report.to_text());
    std::cout << report.to_text();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sign-language recognition: synthetic data, fusion transformers, GA ensemble, decoding"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "generate a synthetic dataset");
    s->add_option("--classes", synth.p.n_classes)->capture_default_str();
    s->add_option("--per-class", synth.p.n_per_signer_class, "records per signer and class")->capture_default_str();
    s->add_option("--signers", synth.p.n_signers)->capture_default_str();
    s->add_option("--noise", synth.p.noise_sigma)->capture_default_str();
    s->add_option("--min-length", synth.p.min_length)->capture_default_str();
    s->add_option("--max-length", synth.p.max_length)->capture_default_str();
    s->add_option("--seed", synth.p.seed)->capture_default_str();
    s->add_option("--out", synth.out)->required();

    TrainArgs train;
    auto* t = app.add_subcommand("train", "train an early- or late-fusion model");
    add_common(t, train.common, true);
    t->add_option("--arch", train.arch, "early or late (default: config, else late)");
    t->add_option("--streams", train.streams, "enabled streams, e.g. A,B,C or A");
    t->add_option("--epochs", train.epochs, "overrides train.epochs");
    t->add_option("--out", train.out)->required();

    GaArgs ga;
    auto* g = app.add_subcommand("ga", "search the ensemble head structure");
    add_common(g, ga.common, true);
    g->add_option("--early", ga.early)->required();
    g->add_option("--late", ga.late)->required();
    g->add_option("--budget-epochs", ga.budget, "ensemble epochs per fitness evaluation");
    g->add_option("--generations", ga.generations);
    g->add_option("--population", ga.population);
    g->add_option("--out", ga.out)->required();

    EnsembleArgs ens;
    auto* e = app.add_subcommand("ensemble", "train the ensemble head");
    add_common(e, ens.common, true);
    e->add_option("--early", ens.early)->required();
    e->add_option("--late", ens.late)->required();
    e->add_option("--chromosome", ens.chromosome, "e.g. 6,310,693,465,638,513,406");
    e->add_option("--epochs", ens.epochs, "overrides ensemble.epochs");
    e->add_option("--out", ens.out)->required();

    EvalArgs ev;
    auto* v = app.add_subcommand("eval", "top-1/top-5 and confusion matrix on a split");
    add_common(v, ev.common, true);
    add_model_args(v, ev.models);
    v->add_option("--split", ev.split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
    v->add_option("--out", ev.out, "metrics JSON")->required();
    v->add_option("--timing", ev.timing, "optional latency JSON");

    SentenceArgs sen;
    auto* n = app.add_subcommand("sentences", "concatenate sampled words into sentences");
    add_common(n, sen.common, true);
    n->add_option("--count", sen.count)->capture_default_str();
    n->add_option("--min-words", sen.min_words)->capture_default_str();
    n->add_option("--max-words", sen.max_words)->capture_default_str();
    n->add_option("--split", sen.split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
    n->add_option("--out", sen.out)->required();

    DecodeArgs dec;
    auto* d = app.add_subcommand("decode", "sliding-window decoding with an error report");
    add_common(d, dec.common, false);
    add_model_args(d, dec.models);
    d->add_option("--sentences", dec.sentences, "directory written by 'sentences'")->required();
    d->add_option("--window", dec.window);
    d->add_option("--step", dec.step);
    d->add_option("--threshold", dec.threshold);
    d->add_option("--out", dec.out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (s->parsed()) cmd_synth(synth);
        else if (t->parsed()) cmd_train(train);
        else if (g->parsed()) cmd_ga(ga);
        else if (e->parsed()) cmd_ensemble(ens);
        else if (v->parsed()) cmd_eval(ev);
        else if (n->parsed()) cmd_sentences(sen);
        else if (d->parsed()) cmd_decode(dec);
    } catch (const ConfigError& err) {
        std::cerr << "config error: " << err.what() << "\n";
        return 1;
    } catch (const ArgumentError& err) {
        std::cerr << "config error: " << err.what() << "\n";
        return 1;
    } catch (const InvalidChromosomeError& err) {
        std::cerr << "config error: " << err.what() << "\n";
        return 1;
    } catch (const FormatError& err) {
        std::cerr << "data error: " << err.what() << "\n";
        return 2;
    } catch (const nlohmann::json::exception& err) {
        std::cerr << "data error: " << err.what() << "\n";
        return 2;
    } catch (const fs::filesystem_error& err) {
        std::cerr << "data error: " << err.what() << "\n";
        return 2;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 3;
    }
    return 0;
}
