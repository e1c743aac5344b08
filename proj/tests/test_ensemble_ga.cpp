#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "slr/ensemble_ga.hpp"
#include "slr/errors.hpp"

using namespace slr;

namespace {

const Chromosome kTarget = Chromosome::parse("6,310,693,465,638,513,406");

GAConfig small_ga(std::uint64_t seed) {
    GAConfig c;
    c.seed = seed;
    return c;
}

FitnessFn mock_fn() {
    return [](const Chromosome& c, std::uint64_t) { return fitness(oracle::mock_fitness(c, kTarget)); };
}

std::vector<double> random_simplex(std::size_t K, std::mt19937_64& rng) {
    std::vector<double> p(K);
    double s = 0.0;
    for (auto& v : p) s += v = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
    for (auto& v : p) v /= s;
    return p;
}

}  // namespace

TEST_CASE("decode_chromosome") {
    const auto w = decode_chromosome(Chromosome::parse("6,310,693,465,638,513,406,0,0"));
    CHECK(w == std::vector<std::size_t>{310, 693, 465, 638, 513, 406});
    CHECK(decode_chromosome(Chromosome::parse("1,5")) == std::vector<std::size_t>{5});

    Chromosome bad;
    bad.genes = {2, 5, 7, 3, 0, 0, 0, 0, 0};  // gene beyond L is non-zero
    CHECK_THROWS_AS(decode_chromosome(bad), InvalidChromosomeError);
    bad.genes = {2, 5, 0, 0, 0, 0, 0, 0, 0};  // active layer of width 0
    CHECK_THROWS_AS(decode_chromosome(bad), InvalidChromosomeError);
    bad.genes = {9, 1, 1, 1, 1, 1, 1, 1, 1};
    CHECK_THROWS_AS(decode_chromosome(bad), InvalidChromosomeError);
    bad.genes = {1, 757, 0, 0, 0, 0, 0, 0, 0};
    CHECK_THROWS_AS(decode_chromosome(bad), InvalidChromosomeError);
    CHECK_THROWS(Chromosome::parse("two,5"));
    CHECK(Chromosome::parse("2,64,32").to_string() == "2,64,32,0,0,0,0,0,0");
}

TEST_CASE("fitness values") {
    CHECK(fitness(0.0) == 1.0);
    CHECK(fitness(2.5) == doctest::Approx(std::exp(1.0)).epsilon(1e-12));
    CHECK(fitness(90.2) == doctest::Approx(4.69e15).epsilon(5e-3));
    CHECK(fitness(90.2) > fitness(90.1));
}

TEST_CASE("select_parents") {
    nn::Rng rng(1);
    const std::vector<double> one{2.0};
    CHECK(select_parents(one, 10, rng) == std::vector<std::size_t>(10, 0));

    const std::vector<double> two{3.0, 1.0};
    const std::size_t N = 100000;
    const auto idx = select_parents(two, N, rng);
    std::size_t zeros = 0;
    for (auto i : idx) zeros += i == 0;
    const double sd = std::sqrt(0.75 * 0.25 / N);
    CHECK(std::abs(static_cast<double>(zeros) / N - 0.75) < 3 * sd);

    const std::vector<double> mixed{0.0, 1.0, 0.0, 2.0};
    for (auto i : select_parents(mixed, 1000, rng)) CHECK((i == 1 || i == 3));

    const std::vector<double> zero(4, 0.0);
    CHECK_THROWS_AS(select_parents(zero, 1, rng), SelectionError);
    const std::vector<double> negative{1.0, -1.0};
    CHECK_THROWS_AS(select_parents(negative, 1, rng), SelectionError);
}

TEST_CASE("uniform_crossover") {
    nn::Rng rng(2);
    const auto p = Chromosome::parse("3,10,20,30");
    CHECK(uniform_crossover(p, p, rng) == p);

    // every child of these two parents, enumerated by hand
    const auto a = Chromosome::parse("3,1,2,3");
    const auto b = Chromosome::parse("5,4,5,6,7,8");
    std::set<std::string> allowed;
    for (int g1 : {1, 4})
        for (int g2 : {2, 5})
            for (int g3 : {3, 6}) {
                allowed.insert(Chromosome::parse("3," + std::to_string(g1) + "," + std::to_string(g2) + "," +
                                                 std::to_string(g3))
                                   .to_string());
                allowed.insert(Chromosome::parse("5," + std::to_string(g1) + "," + std::to_string(g2) + "," +
                                                 std::to_string(g3) + ",7,8")
                                   .to_string());
            }
    std::set<std::string> seen;
    for (int i = 0; i < 2000; ++i) {
        const auto c = uniform_crossover(a, b, rng);
        CHECK(allowed.count(c.to_string()) == 1);
        seen.insert(c.to_string());
    }
    CHECK(seen == allowed);

    for (int i = 0; i < 10000; ++i) {
        const auto x = Chromosome::random(rng), y = Chromosome::random(rng);
        CHECK(uniform_crossover(x, y, rng).is_valid());
    }
}

TEST_CASE("mutate") {
    nn::Rng rng(3);
    GAConfig all;
    all.layer_gene_mutation_rate = 1.0;
    all.neuron_gene_mutation_rate = 1.0;
    const auto c = Chromosome::parse("4,8,9,10,11");
    CHECK(mutate(c, all, rng, true) == c);

    GAConfig none;
    none.layer_gene_mutation_rate = 0.0;
    none.neuron_gene_mutation_rate = 0.0;
    for (int i = 0; i < 100; ++i) CHECK(mutate(c, none, rng, false) == c);

    const auto grown = set_layer_count(Chromosome::parse("3,1,2,3"), 5, rng);
    CHECK(grown.genes[0] == 5);
    CHECK(grown.genes[1] == 1);
    CHECK(grown.genes[3] == 3);
    CHECK(grown.genes[4] >= 1);
    CHECK(grown.genes[5] >= 1);
    CHECK(grown.genes[6] == 0);
    CHECK(grown.is_valid());
    const auto shrunk = set_layer_count(grown, 2, rng);
    CHECK(shrunk == Chromosome::parse("2,1,2"));
    CHECK_THROWS_AS(set_layer_count(grown, 0, rng), InvalidChromosomeError);

    for (int i = 0; i < 10000; ++i) CHECK(mutate(Chromosome::random(rng), all, rng, false).is_valid());
}

TEST_CASE("run_ga with constant fitness is flat") {
    const auto r = run_ga([](const Chromosome&, std::uint64_t) { return 3.0; }, small_ga(0));
    REQUIRE(r.history.size() == 30);
    for (const auto& h : r.history) CHECK(h.best_fitness == 3.0);
}

TEST_CASE("run_ga keeps the best fitness non-decreasing") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto r = run_ga(mock_fn(), small_ga(seed));
        for (std::size_t g = 1; g < r.history.size(); ++g)
            CHECK(r.history[g].best_fitness >= r.history[g - 1].best_fitness);
        CHECK(r.best_fitness == r.history.back().best_fitness);
    }
}

TEST_CASE("run_ga beats random search on the mock objective") {
    std::vector<double> ga, baseline;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        ga.push_back(oracle::mock_fitness(run_ga(mock_fn(), small_ga(seed)).best, kTarget));
        baseline.push_back(oracle::random_search_best(kTarget, 20, 1000 + seed));
    }
    CHECK(oracle::median(ga) > oracle::median(baseline));
}

TEST_CASE("run_ga is deterministic and passes per-slot seeds") {
    std::ostringstream l1, l2;
    const auto a = run_ga(mock_fn(), small_ga(4), &l1);
    const auto b = run_ga(mock_fn(), small_ga(4), &l2);
    CHECK(a.best == b.best);
    CHECK(l1.str() == l2.str());

    std::set<std::uint64_t> seeds;
    std::size_t calls = 0;
    auto cfg = small_ga(4);
    cfg.generations = 3;
    run_ga(
        [&](const Chromosome&, std::uint64_t s) {
            seeds.insert(s);
            ++calls;
            return 1.0;
        },
        cfg);
    CHECK(seeds.size() == calls);

    cfg.parents_per_generation = 21;
    CHECK_THROWS_AS(run_ga(mock_fn(), cfg), ConfigError);
}

TEST_CASE("ensemble_forward") {
    std::mt19937_64 rng(5);
    const std::size_t K = 6;
    EnsembleHead<float> head(K, {16, 8});
    head.init(1);
    const auto pe = random_simplex(K, rng), pl = random_simplex(K, rng);
    const auto p = ensemble_forward(pe, pl, head);
    REQUIRE(p.size() == K);
    double s = 0.0;
    for (double v : p) {
        CHECK(v > 0.0);
        s += v;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));

    // route the late half straight through: argmax must follow the late model
    EnsembleHead<float> route(K, {K});
    auto& L = route.layers();
    L[0].weight.value.setZero();
    L[0].bias.value.setZero();
    for (std::size_t k = 0; k < K; ++k) L[0].weight.value(static_cast<Eigen::Index>(K + k), static_cast<Eigen::Index>(k)) = 10.0f;
    L[1].weight.value.setIdentity();
    L[1].bias.value.setZero();
    for (int t = 0; t < 20; ++t) {
        const auto e = random_simplex(K, rng), l = random_simplex(K, rng);
        const auto q = ensemble_forward(e, l, route);
        CHECK(std::max_element(q.begin(), q.end()) - q.begin() == std::max_element(l.begin(), l.end()) - l.begin());
    }

    EnsembleHead<float> big(101, {64, 32});
    big.init(2);
    const auto u = random_simplex(101, rng);
    CHECK(ensemble_forward(u, u, big).size() == 101);
    const auto short_p = random_simplex(5, rng);
    CHECK_THROWS_AS(ensemble_forward(short_p, short_p, big), ConfigError);
    CHECK_THROWS_AS(ensemble_forward(u, short_p, big), ConfigError);
}

TEST_CASE("ensemble head gradient") {
    const std::size_t K = 4;
    EnsembleHead<double> head(K, {5, 3});
    head.init(3);
    std::mt19937_64 rng(6);
    nn::RowVec<double> x(2 * K);
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    nn::RowVec<double> w(K);
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = std::normal_distribution<double>()(rng);
    // loss = w . logits, so dloss/dlogits = w
    EnsembleHead<double>::Cache cache;
    head.zero_grad();
    head.logits(x, &cache);
    head.backward(cache, w);
    const double h = 1e-6;
    for (auto* p : head.parameters())
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            const double saved = p->value.data()[i];
            p->value.data()[i] = saved + h;
            const double up = head.logits(x).dot(w);
            p->value.data()[i] = saved - h;
            const double down = head.logits(x).dot(w);
            p->value.data()[i] = saved;
            CHECK(oracle::rel_error(p->grad.data()[i], (up - down) / (2 * h)) < 1e-6);
        }
}

TEST_CASE("train_ensemble leaves the base models untouched") {
    SynthParams sp;
    sp.n_classes = 3;
    sp.n_per_signer_class = 2;
    sp.n_signers = 3;
    sp.min_length = 21;
    sp.max_length = 45;
    const auto ds = generate_synthetic_dataset(sp);
    FusionModel<float> early(oracle::tiny_config(Architecture::Early));
    FusionModel<float> late(oracle::tiny_config(Architecture::Late));
    early.init(1);
    late.init(2);
    std::vector<nn::Mat<float>> before;
    for (const auto* p : early.parameters()) before.push_back(p->value);
    for (const auto* p : late.parameters()) before.push_back(p->value);

    EnsembleTrainConfig cfg;
    cfg.epochs = 1;
    const auto ck = train_ensemble(early, late, Chromosome::parse("2,8,4"), ds, cfg);
    CHECK(ck.epoch == 1);
    CHECK(ck.head.hidden() == std::vector<std::size_t>{8, 4});

    std::size_t i = 0;
    for (const auto* p : early.parameters()) CHECK(p->value == before[i++]);
    for (const auto* p : late.parameters()) CHECK(p->value == before[i++]);

    const auto path = std::filesystem::temp_directory_path() / "slr_test_ensemble.slrc";
    save_ensemble(ck, path);
    const auto back = load_ensemble(path);
    std::filesystem::remove(path);
    CHECK(back.chromosome == ck.chromosome);
    CHECK(back.epoch == ck.epoch);
    CHECK(back.val_top1 == ck.val_top1);
    CHECK(back.val_nll == ck.val_nll);
    const auto pa = ck.head.parameters();
    const auto pb = back.head.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t k = 0; k < pa.size(); ++k) CHECK(pa[k]->value == pb[k]->value);
}

TEST_CASE("train_ensemble on cached outputs is deterministic") {
    std::mt19937_64 rng(7);
    const std::size_t K = 5;
    CachedOutputs tr, va;
    for (std::size_t i = 0; i < 60; ++i) {
        auto& c = i < 40 ? tr : va;
        const auto label = static_cast<std::uint32_t>(i % K);
        auto p = random_simplex(K, rng);
        p[label] += 1.0;
        for (auto& v : p) v /= 2.0;
        c.early.push_back(p);
        c.late.push_back(random_simplex(K, rng));
        c.labels.push_back(label);
    }
    EnsembleTrainConfig cfg;
    cfg.epochs = 150;
    const auto a = train_ensemble(tr, va, Chromosome::parse("1,16"), K, cfg);
    const auto b = train_ensemble(tr, va, Chromosome::parse("1,16"), K, cfg);
    CHECK(a.epoch == b.epoch);
    CHECK(a.val_top1 == b.val_top1);
    CHECK(a.head.parameters()[0]->value == b.head.parameters()[0]->value);
    CHECK(a.val_top1 > 0.5);  // the early half carries the label
}
