#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <random>

#include "fives/graph.hpp"
#include "fives/rng.hpp"

using namespace fives;
using namespace fives::graph;
using Catch::Approx;

namespace {

AdjLogits random_logits(std::size_t num_layers, std::size_t m, std::uint64_t seed,
                        double scale = 2.0) {
    AdjLogits h = AdjLogits::zeros(num_layers, m);
    Rng rng(seed);
    for (auto& t : h.trainable)
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-scale, scale);
    return h;
}

AdjTensor random_binary(std::size_t num_layers, std::size_t m, std::uint64_t seed,
                        double density = 0.4) {
    AdjTensor a;
    a.mode = AdjMode::Binarized;
    a.slices.push_back(Tensor::identity(m));
    Rng rng(seed);
    for (std::size_t k = 1; k < num_layers; ++k) {
        Tensor s({m, m});
        for (std::size_t i = 0; i < s.size(); ++i) s[i] = rng.bernoulli(density) ? 1.0 : 0.0;
        a.slices.push_back(std::move(s));
    }
    return a;
}

// Independent oracle: enumerate every layer-indexed partner tuple.
std::vector<CrossFeature> brute_force_crosses(const AdjTensor& bin, std::size_t max_order,
                                              const AdjTensor* soft) {
    const std::size_t m = bin.m();
    std::vector<CrossFeature> out;
    for (std::size_t anchor = 0; anchor < m; ++anchor) {
        for (std::size_t k = 2; k <= max_order; ++k) {
            const std::size_t len = k - 1;
            std::vector<std::size_t> tuple(len, 0);
            while (true) {
                bool ok = true;
                for (std::size_t l = 0; l < len && ok; ++l)
                    ok = bin.at(l + 1, anchor, tuple[l]) == 1.0;
                if (ok) {
                    CrossFeature c;
                    c.anchor = anchor;
                    c.partners = tuple;
                    c.score = 1.0;
                    if (soft)
                        for (std::size_t l = 0; l < len; ++l)
                            c.score *= soft->at(l + 1, anchor, tuple[l]);
                    out.push_back(std::move(c));
                }
                std::size_t pos = len;
                while (pos > 0) {
                    if (++tuple[pos - 1] < m) break;
                    tuple[pos - 1] = 0;
                    --pos;
                }
                if (pos == 0) break;
            }
        }
    }
    // oracle enumerates order-major per anchor differently; normalize order
    std::sort(out.begin(), out.end(), [](const CrossFeature& a, const CrossFeature& b) {
        if (a.anchor != b.anchor) return a.anchor < b.anchor;
        if (a.order() != b.order()) return a.order() < b.order();
        return a.partners < b.partners;
    });
    return out;
}

std::vector<CrossFeature> sorted_like_oracle(std::vector<CrossFeature> v) {
    std::sort(v.begin(), v.end(), [](const CrossFeature& a, const CrossFeature& b) {
        if (a.anchor != b.anchor) return a.anchor < b.anchor;
        if (a.order() != b.order()) return a.order() < b.order();
        return a.partners < b.partners;
    });
    return v;
}

}  // namespace

TEST_CASE("soft adjacency recursion") {
    SECTION("zero logits give the maximal-entropy slice") {
        auto h = AdjLogits::zeros(2, 3);
        auto a = compute_soft_adjacency(h, uniform_thresholds(2));
        a.validate();
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) {
                CHECK(a.at(0, i, j) == (i == j ? 1.0 : 0.0));
                CHECK(a.at(1, i, j) == Approx(0.5));
            }
    }
    SECTION("all-ones predecessor averages the sigmoid columns") {
        auto h = random_logits(3, 2, 5);
        h.trainable[0].fill(0.0);  // slice 1 = all 0.5
        std::vector<double> thr = {0.5, 0.4, 0.5};  // 0.5 >= 0.4 -> phi(A1) all ones
        auto a = compute_soft_adjacency(h, thr);
        const Tensor sig = ad::sigmoid(h.trainable[1]);
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 2; ++j)
                CHECK(a.at(2, i, j) == Approx(0.5 * (sig.at(0, j) + sig.at(1, j))).margin(1e-12));
    }
    SECTION("a zero predecessor row zeroes the next slice's row") {
        auto h = random_logits(3, 3, 6);
        for (std::size_t j = 0; j < 3; ++j) h.trainable[0].at(1, j) = -30.0;  // row 1 -> ~0
        auto a = compute_soft_adjacency(h, uniform_thresholds(3));
        for (std::size_t j = 0; j < 3; ++j) CHECK(a.at(2, 1, j) == 0.0);
        a.validate();
    }
}

TEST_CASE("independent adjacency") {
    auto zero = AdjLogits::zeros(3, 3);
    auto a = compute_independent_adjacency(zero);
    for (std::size_t k = 1; k < 3; ++k)
        for (std::size_t i = 0; i < 9; ++i) CHECK(a.slices[k][i] == Approx(0.5));

    SECTION("differs from the recursive variant when phi(prev) is not I") {
        auto h = random_logits(3, 3, 77);
        auto rec = compute_soft_adjacency(h, uniform_thresholds(3));
        auto ind = compute_independent_adjacency(h);
        bool differs = false;
        for (std::size_t i = 0; i < 9 && !differs; ++i)
            differs = std::abs(rec.slices[2][i] - ind.slices[2][i]) > 1e-9;
        CHECK(differs);
        // slice 1 always agrees: its predecessor is I
        for (std::size_t i = 0; i < 9; ++i)
            CHECK(rec.slices[1][i] == Approx(ind.slices[1][i]).margin(1e-15));
    }
    SECTION("K=1 yields only the identity slice in both variants") {
        auto h1 = AdjLogits::zeros(1, 4);
        auto rec = compute_soft_adjacency(h1, uniform_thresholds(1));
        auto ind = compute_independent_adjacency(h1);
        CHECK(rec.num_layers() == 1);
        CHECK(ind.num_layers() == 1);
        rec.validate();
    }
    SECTION("variants agree when every slice binarizes to the identity") {
        // strong diagonal, strongly negative off-diagonal
        auto h = AdjLogits::zeros(4, 3);
        for (auto& t : h.trainable)
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 3; ++j) t.at(i, j) = i == j ? 6.0 : -6.0;
        auto rec = compute_soft_adjacency(h, uniform_thresholds(4));
        auto ind = compute_independent_adjacency(h);
        for (std::size_t k = 1; k < 4; ++k)
            for (std::size_t i = 0; i < 9; ++i)
                CHECK(rec.slices[k][i] == Approx(ind.slices[k][i]).margin(1e-12));
    }
}

TEST_CASE("temperature rescaling") {
    AdjTensor a;
    a.slices.push_back(Tensor::identity(2));
    a.slices.push_back(Tensor::from_values({2, 2}, {0.5, 0.7, 0.3, 0.9}));

    SECTION("tau=1 is the identity on (0,1)") {
        auto r = rescale(a, 1.0);
        for (std::size_t i = 0; i < 4; ++i)
            CHECK(r.slices[1][i] == Approx(a.slices[1][i]).margin(1e-12));
    }
    SECTION("0.5 is a fixed point at any tau") {
        for (double tau : {1.0, 0.3, 0.02})
            CHECK(rescale_entry(0.5, tau) == Approx(0.5).margin(1e-15));
    }
    SECTION("low temperature saturates") {
        CHECK(rescale_entry(0.7, 0.02) == Approx(1.0).margin(1e-12));
        CHECK(rescale_entry(0.3, 0.02) == Approx(0.0).margin(1e-12));
    }
    SECTION("slice 0 untouched") {
        auto r = rescale(a, 0.02);
        for (std::size_t i = 0; i < 4; ++i) CHECK(r.slices[0][i] == a.slices[0][i]);
    }
    SECTION("monotone in each entry") {
        Rng rng(3);
        for (int trial = 0; trial < 200; ++trial) {
            double x = rng.uniform(0.01, 0.99), y = rng.uniform(0.01, 0.99);
            if (x > y) std::swap(x, y);
            const double tau = rng.uniform(0.02, 2.0);
            CHECK(rescale_entry(x, tau) <= rescale_entry(y, tau) + 1e-15);
        }
    }
}

TEST_CASE("binarization") {
    AdjTensor a;
    a.slices.push_back(Tensor::identity(2));
    a.slices.push_back(Tensor({2, 2}, 0.5));

    auto ones = binarize(a, uniform_thresholds(2, 0.5));
    for (std::size_t i = 0; i < 4; ++i) CHECK(ones.slices[1][i] == 1.0);  // ties go up

    AdjTensor b;
    b.slices.push_back(Tensor::identity(2));
    b.slices.push_back(Tensor::from_values({2, 2}, {0.3, 0.8, 0.5, 0.2}));

    auto high = binarize(b, uniform_thresholds(2, 0.999999));
    for (std::size_t i = 0; i < 4; ++i) CHECK(high.slices[1][i] == 0.0);

    auto mixed = binarize(b, uniform_thresholds(2, 0.5));
    CHECK(mixed.slices[1].at(0, 0) == 0.0);
    CHECK(mixed.slices[1].at(0, 1) == 1.0);
    CHECK(mixed.slices[1].at(1, 0) == 1.0);
    CHECK(mixed.slices[1].at(1, 1) == 0.0);

    SECTION("idempotent") {
        auto once = binarize(b, uniform_thresholds(2, 0.5));
        auto twice = binarize(once, uniform_thresholds(2, 0.5));
        for (std::size_t k = 0; k < 2; ++k)
            for (std::size_t i = 0; i < 4; ++i)
                CHECK(twice.slices[k][i] == once.slices[k][i]);
    }
    SECTION("thresholds outside (0,1) rejected") {
        CHECK_THROWS_AS(binarize(b, uniform_thresholds(2, 1.0)), ConfigError);
        CHECK_THROWS_AS(binarize(b, uniform_thresholds(2, 0.0)), ConfigError);
    }
}

TEST_CASE("temperature schedule") {
    TemperatureSchedule sched;
    sched.total_steps = 100;
    sched.validate();
    CHECK(sched.at(0) == 1.0);
    CHECK(sched.at(100) == Approx(0.02));
    CHECK(sched.at(1000) == Approx(0.02));
    for (std::size_t s = 1; s <= 100; ++s) CHECK(sched.at(s) <= sched.at(s - 1) + 1e-15);

    TemperatureSchedule expo = sched;
    expo.shape = TemperatureSchedule::Shape::Exponential;
    CHECK(expo.at(0) == 1.0);
    CHECK(expo.at(100) == Approx(0.02));
    for (std::size_t s = 1; s <= 100; ++s) CHECK(expo.at(s) <= expo.at(s - 1) + 1e-15);

    TemperatureSchedule degenerate;
    degenerate.total_steps = 0;
    CHECK(degenerate.at(0) == Approx(0.02));
}

TEST_CASE("cross derivation basics") {
    SECTION("single active edge") {
        AdjTensor a;
        a.mode = AdjMode::Binarized;
        a.slices.push_back(Tensor::identity(2));
        a.slices.push_back(Tensor::from_values({2, 2}, {0.0, 1.0, 0.0, 0.0}));
        DeriveOptions opt;
        opt.dedupe = false;
        auto crosses = derive_cross_features(a, 2, opt);
        REQUIRE(crosses.size() == 1);
        CHECK(crosses[0].anchor == 0);
        CHECK(crosses[0].partners == std::vector<std::size_t>{1});
        CHECK(crosses[0].order() == 2);
    }
    SECTION("chained layers extend the anchor's cross") {
        AdjTensor a;
        a.mode = AdjMode::Binarized;
        a.slices.push_back(Tensor::identity(3));
        Tensor s1({3, 3});
        s1.at(0, 1) = 1.0;
        Tensor s2({3, 3});
        s2.at(0, 2) = 1.0;
        a.slices.push_back(s1);
        a.slices.push_back(s2);
        DeriveOptions opt;
        opt.dedupe = false;
        auto crosses = derive_cross_features(a, 3, opt);
        REQUIRE(crosses.size() == 2);
        CHECK(crosses[0].partners == std::vector<std::size_t>{1});
        CHECK(crosses[1].partners == std::vector<std::size_t>{1, 2});
    }
    SECTION("empty adjacency yields no crosses") {
        AdjTensor a;
        a.mode = AdjMode::Binarized;
        a.slices.push_back(Tensor::identity(3));
        a.slices.push_back(Tensor({3, 3}));
        CHECK(derive_cross_features(a, 2).empty());
    }
    SECTION("dedupe merges equal member multisets keeping the best score") {
        AdjTensor a;
        a.mode = AdjMode::Binarized;
        a.slices.push_back(Tensor::identity(2));
        a.slices.push_back(Tensor::from_values({2, 2}, {0.0, 1.0, 1.0, 0.0}));
        AdjTensor soft;
        soft.slices.push_back(Tensor::identity(2));
        soft.slices.push_back(Tensor::from_values({2, 2}, {0.1, 0.6, 0.8, 0.1}));
        DeriveOptions opt;
        opt.dedupe = true;
        opt.soft_scores = &soft;
        auto crosses = derive_cross_features(a, 2, opt);
        REQUIRE(crosses.size() == 1);
        CHECK(crosses[0].score == Approx(0.8));  // max of 0.6 and 0.8
        CHECK(crosses[0].member_multiset() == std::vector<std::size_t>{0, 1});
    }
    SECTION("cap error reports per-layer fan-out") {
        AdjTensor a;
        a.mode = AdjMode::Binarized;
        a.slices.push_back(Tensor::identity(4));
        for (int k = 0; k < 3; ++k) a.slices.push_back(Tensor({4, 4}, 1.0));
        DeriveOptions opt;
        opt.cap = 100;
        try {
            derive_cross_features(a, 4, opt);
            FAIL("expected CapError");
        } catch (const CapError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("layer1=16") != std::string::npos);
            CHECK(msg.find("layer3=16") != std::string::npos);
        }
    }
}

TEST_CASE("cross derivation matches exhaustive enumeration") {
    Rng seeds(2024);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t m = 2 + seeds.uniform_int(4);           // 2..5
        const std::size_t layers = 2 + seeds.uniform_int(3);      // 2..4
        const auto max_order = layers;
        auto bin = random_binary(layers, m, seeds.next_u64(), 0.35);
        auto h = random_logits(layers, m, seeds.next_u64());
        auto soft = compute_independent_adjacency(h);

        DeriveOptions opt;
        opt.dedupe = false;
        opt.soft_scores = &soft;
        auto got = sorted_like_oracle(derive_cross_features(bin, max_order, opt));
        auto want = brute_force_crosses(bin, max_order, &soft);

        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].anchor == want[i].anchor);
            CHECK(got[i].partners == want[i].partners);
            CHECK(got[i].score == Approx(want[i].score).margin(1e-12));
        }
    }
}

TEST_CASE("adjacency artifact round trip") {
    auto h = random_logits(3, 3, 11);
    auto soft = compute_soft_adjacency(h, uniform_thresholds(3));
    auto bin = binarize(soft, uniform_thresholds(3));
    std::vector<std::string> names = {"a", "b", "c"};
    auto j = adjacency_to_json(soft, bin, uniform_thresholds(3), names);
    CHECK(j.begin().key() == "format_version");
    auto art = adjacency_from_json(j);
    CHECK(art.feature_names == names);
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t i = 0; i < 9; ++i) {
            CHECK(art.soft.slices[k][i] == soft.slices[k][i]);
            CHECK(art.binarized.slices[k][i] == bin.slices[k][i]);
        }
}

TEST_CASE("cross csv round trip") {
    namespace fs = std::filesystem;
    const auto path = fs::temp_directory_path() / "fives_crosses_test.csv";
    std::vector<CrossFeature> crosses;
    CrossFeature c1;
    c1.anchor = 0;
    c1.partners = {1};
    c1.score = 0.75;
    CrossFeature c2;
    c2.anchor = 2;
    c2.partners = {0, 1};
    c2.score = 0.25;
    crosses = {c1, c2};
    write_cross_csv(path.string(), crosses, {"alpha", "beta", "gamma"});
    auto records = read_cross_csv(path.string());
    REQUIRE(records.size() == 2);
    CHECK(records[0].order == 2);
    CHECK(records[0].anchor == "alpha");
    CHECK(records[0].partners == std::vector<std::string>{"beta"});
    CHECK(records[0].score == Approx(0.75));
    CHECK(records[1].partners == std::vector<std::string>{"alpha", "beta"});
    fs::remove(path);
}
