#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fives/downstream.hpp"
#include "fives/theory.hpp"

using namespace fives;
using namespace fives::downstream;
using Catch::Approx;

namespace {

// O(P*N) pair-counting oracle for AUC.
double auc_pairs(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i)
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (!(labels[i] == 1 && labels[j] == 0)) continue;
            pairs += 1.0;
            if (scores[i] > scores[j])
                wins += 1.0;
            else if (scores[i] == scores[j])
                wins += 0.5;
        }
    return wins / pairs;
}

data::EncodedTable table_from_codes(const std::vector<std::vector<std::int32_t>>& cols,
                                    const std::vector<std::uint8_t>& labels) {
    data::EncodedTable t;
    t.labels = labels;
    for (std::size_t c = 0; c < cols.size(); ++c) {
        std::vector<std::string> cells;
        cells.reserve(cols[c].size());
        for (auto v : cols[c]) cells.push_back(std::to_string(v));
        t.columns.push_back(data::encode_categorical("f" + std::to_string(c), cells));
    }
    return t;
}

// n copies of each (x1, x2) combination with y = x1 XOR x2.
data::EncodedTable xor_table(std::size_t copies) {
    std::vector<std::int32_t> c0, c1;
    std::vector<std::uint8_t> y;
    for (std::size_t r = 0; r < copies; ++r)
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) {
                c0.push_back(a);
                c1.push_back(b);
                y.push_back(static_cast<std::uint8_t>(a ^ b));
            }
    return table_from_codes({c0, c1}, y);
}

graph::CrossFeature cross_of(std::size_t anchor, std::vector<std::size_t> partners) {
    graph::CrossFeature c;
    c.anchor = anchor;
    c.partners = std::move(partners);
    return c;
}

}  // namespace

TEST_CASE("auc basics") {
    CHECK(auc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == Approx(0.75));
    CHECK(auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
    CHECK(auc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}) == Approx(0.5));
    CHECK_THROWS_AS(auc({0.1, 0.2}, {1, 1}), MetricError);
    CHECK_THROWS_AS(auc({0.1, 0.2}, {0, 0}), MetricError);
}

TEST_CASE("auc properties") {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 5 + rng.uniform_int(30);
        std::vector<double> scores(n);
        std::vector<std::uint8_t> labels(n);
        bool both = false;
        while (!both) {
            for (std::size_t i = 0; i < n; ++i) {
                // coarse grid so ties actually happen
                scores[i] = std::round(rng.uniform() * 8.0) / 8.0;
                labels[i] = rng.bernoulli(0.5) ? 1 : 0;
            }
            bool h0 = false, h1 = false;
            for (auto y : labels) (y ? h1 : h0) = true;
            both = h0 && h1;
        }
        const double got = auc(scores, labels);
        CHECK(got == Approx(auc_pairs(scores, labels)).margin(1e-12));

        // invariant under strictly increasing transforms
        std::vector<double> warped(n);
        for (std::size_t i = 0; i < n; ++i) warped[i] = std::exp(3.0 * scores[i]) - 2.0;
        CHECK(auc(warped, labels) == Approx(got).margin(1e-12));

        // complement identity needs tie-free scores
        std::vector<double> unique(n);
        for (std::size_t i = 0; i < n; ++i) unique[i] = rng.uniform() + 1e-9 * static_cast<double>(i);
        std::vector<std::uint8_t> flipped(n);
        for (std::size_t i = 0; i < n; ++i) flipped[i] = labels[i] ? 0 : 1;
        CHECK(auc(unique, labels) + auc(unique, flipped) == Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("materialize crosses") {
    SECTION("self cross is rejected") {
        auto t = xor_table(2);
        CHECK_THROWS_AS(materialize_crosses(t, {cross_of(0, {0})}), DomainError);
    }
    SECTION("two binary columns") {
        auto t = xor_table(3);
        auto out = materialize_crosses(t, {cross_of(0, {1})});
        REQUIRE(out.n_features() == 3);
        const auto& col = out.columns.back();
        CHECK(col.cardinality() == 4);
        CHECK(col.name == "cross(f0|f1)");
        // dense map of pairs: rows with equal (f0, f1) share a code
        for (std::size_t r = 0; r < out.n_rows(); ++r)
            for (std::size_t q = 0; q < out.n_rows(); ++q) {
                const bool same_tuple = t.columns[0].codes[r] == t.columns[0].codes[q] &&
                                        t.columns[1].codes[r] == t.columns[1].codes[q];
                CHECK((col.codes[r] == col.codes[q]) == same_tuple);
            }
    }
    SECTION("three-column cross matches the tuple-dictionary oracle") {
        auto t = table_from_codes({{0, 1, 0, 1, 0}, {2, 2, 0, 1, 2}, {1, 1, 1, 0, 1}},
                                  {1, 0, 1, 0, 1});
        auto out = materialize_crosses(t, {cross_of(2, {0, 1})});
        const auto& col = out.columns.back();
        std::map<std::array<std::int32_t, 3>, std::int32_t> oracle;
        for (std::size_t r = 0; r < 5; ++r) {
            std::array<std::int32_t, 3> key = {t.columns[0].codes[r], t.columns[1].codes[r],
                                               t.columns[2].codes[r]};
            auto [it, fresh] = oracle.emplace(key, static_cast<std::int32_t>(oracle.size()));
            (void)fresh;
            CHECK(col.codes[r] == it->second);
        }
    }
    SECTION("originals untouched, order preserved") {
        auto t = xor_table(2);
        auto out = materialize_crosses(t, {cross_of(0, {1})});
        CHECK(out.columns[0].codes == t.columns[0].codes);
        CHECK(out.columns[1].codes == t.columns[1].codes);
        CHECK(out.labels == t.labels);
    }
    SECTION("cardinality cap") {
        auto t = xor_table(2);
        MaterializeOptions opt;
        opt.max_cardinality = 3;
        CHECK_THROWS_AS(materialize_crosses(t, {cross_of(0, {1})}, opt), CapError);
    }
    SECTION("splits share one tuple dictionary") {
        auto full = table_from_codes({{0, 1, 1, 1, 0, 0}, {1, 0, 1, 1, 0, 1}},
                                     {1, 0, 1, 0, 1, 0});
        auto a = data::take_rows(full, {0, 1, 2});
        auto b = data::take_rows(full, {2, 3, 4, 5});
        auto aug = materialize_crosses_shared({&a, &b}, {cross_of(0, {1})});
        const auto& ca = aug[0].columns.back();
        const auto& cb = aug[1].columns.back();
        CHECK(ca.vocab == cb.vocab);
        // equal tuples carry equal codes across the two parts
        for (std::size_t r = 0; r < a.n_rows(); ++r)
            for (std::size_t q = 0; q < b.n_rows(); ++q) {
                const bool same_tuple = a.columns[0].codes[r] == b.columns[0].codes[q] &&
                                        a.columns[1].codes[r] == b.columns[1].codes[q];
                CHECK((ca.codes[r] == cb.codes[q]) == same_tuple);
            }
    }
    SECTION("tables with foreign vocabularies are rejected") {
        auto a = table_from_codes({{0, 1}, {1, 0}}, {1, 0});
        auto b = table_from_codes({{2, 3}, {1, 0}}, {1, 0});
        CHECK_THROWS_AS(materialize_crosses_shared({&a, &b}, {cross_of(0, {1})}),
                        ContractError);
    }
}

TEST_CASE("logistic regression") {
    SECTION("separable single column") {
        auto t = table_from_codes({{0, 0, 0, 1, 1, 1, 0, 1}}, {0, 0, 0, 1, 1, 1, 0, 1});
        auto model = train_logistic_regression(t);
        CHECK(auc(model.scores(t), t.labels) == 1.0);
    }
    SECTION("huge l1 zeroes every weight") {
        auto t = table_from_codes({{0, 1, 0, 1}}, {0, 1, 1, 0});
        LRConfig cfg;
        cfg.l1 = 1e6;
        auto model = train_logistic_regression(t, cfg);
        for (double w : model.weights) CHECK(w == 0.0);
    }
    SECTION("xor is linearly inseparable; the cross fixes it") {
        auto t = xor_table(50);
        auto raw = train_logistic_regression(t);
        const double raw_auc = auc(raw.scores(t), t.labels);
        CHECK(raw_auc > 0.4);
        CHECK(raw_auc < 0.6);

        auto crossed = materialize_crosses(t, {cross_of(0, {1})});
        auto model = train_logistic_regression(crossed);
        CHECK(auc(model.scores(crossed), crossed.labels) > 0.99);
    }
    SECTION("objective trace is non-increasing") {
        auto t = xor_table(25);
        auto crossed = materialize_crosses(t, {cross_of(0, {1})});
        auto model = train_logistic_regression(crossed);
        for (std::size_t i = 1; i < model.objective_trace.size(); ++i)
            CHECK(model.objective_trace[i] <= model.objective_trace[i - 1] + 1e-15);
    }
    SECTION("single-class labels are degenerate") {
        auto t = table_from_codes({{0, 1}}, {1, 1});
        CHECK_THROWS_AS(train_logistic_regression(t), DegenerateDataError);
    }
    SECTION("deterministic") {
        auto t = xor_table(20);
        auto a = train_logistic_regression(t);
        auto b = train_logistic_regression(t);
        CHECK(a.weights == b.weights);
        CHECK(a.bias == b.bias);
    }
}

TEST_CASE("cmi pair ranking") {
    SECTION("xor pair dominates and approaches log 2") {
        auto t = xor_table(100);
        // append an uninformative constant feature
        std::vector<std::string> cells(t.n_rows(), "k");
        t.columns.push_back(data::encode_categorical("f2", cells));
        auto ranked = cmi_rank_pairs(t, 3);
        REQUIRE(ranked.size() == 3);
        CHECK(ranked[0].anchor == 0);
        CHECK(ranked[0].partners == std::vector<std::size_t>{1});
        CHECK(ranked[0].score == Approx(std::log(2.0)).margin(1e-12));
        CHECK(ranked[1].score == Approx(0.0).margin(1e-12));
    }
    SECTION("exact ties fall back to lexicographic order") {
        // three single-category features: every pair has MI exactly 0
        std::vector<std::string> k(8, "k");
        data::EncodedTable t;
        t.labels = {0, 1, 0, 1, 0, 1, 0, 1};
        for (int c = 0; c < 3; ++c)
            t.columns.push_back(data::encode_categorical("f" + std::to_string(c), k));
        auto ranked = cmi_rank_pairs(t, 10);
        REQUIRE(ranked.size() == 3);
        CHECK(ranked[0].anchor == 0);
        CHECK(ranked[0].partners == std::vector<std::size_t>{1});
        CHECK(ranked[1].partners == std::vector<std::size_t>{2});
        CHECK(ranked[2].anchor == 1);
    }
    SECTION("top_n larger than the pair count returns all pairs") {
        auto t = xor_table(4);
        CHECK(cmi_rank_pairs(t, 100).size() == 1);
    }
}

TEST_CASE("plug-in MI agrees with the entropy-based oracle") {
    Rng rng(31);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t n = 40 + rng.uniform_int(60);
        std::vector<std::int32_t> c0(n), c1(n);
        std::vector<std::uint8_t> y(n);
        for (std::size_t r = 0; r < n; ++r) {
            c0[r] = static_cast<std::int32_t>(rng.uniform_int(3));
            c1[r] = static_cast<std::int32_t>(rng.uniform_int(2));
            y[r] = rng.bernoulli(0.3 + 0.2 * static_cast<double>(c0[r] == c1[r])) ? 1 : 0;
        }
        bool h0 = false, h1 = false;
        for (auto v : y) (v ? h1 : h0) = true;
        if (!h0 || !h1) continue;
        auto t = table_from_codes({c0, c1}, y);

        const double plug_in = pair_label_mi(t, 0, 1);

        const auto ci = static_cast<std::size_t>(t.columns[0].cardinality());
        const auto cj = static_cast<std::size_t>(t.columns[1].cardinality());
        Tensor joint({ci * cj, 2});
        for (std::size_t r = 0; r < n; ++r)
            joint.at(static_cast<std::size_t>(t.columns[0].codes[r]) * cj +
                         static_cast<std::size_t>(t.columns[1].codes[r]),
                     y[r]) += 1.0 / static_cast<double>(n);
        CHECK(plug_in == Approx(theory::mutual_information(joint)).margin(1e-10));
    }
}

TEST_CASE("random cross baseline") {
    SECTION("exhaustion returns every subset") {
        auto all = random_cross_baseline(3, 3, 2, 5);
        REQUIRE(all.size() == 3);
        std::set<std::vector<std::size_t>> subsets;
        for (const auto& c : all) subsets.insert(c.member_multiset());
        CHECK(subsets.count({0, 1}) == 1);
        CHECK(subsets.count({0, 2}) == 1);
        CHECK(subsets.count({1, 2}) == 1);
    }
    SECTION("deterministic per seed, distinct subsets") {
        auto a = random_cross_baseline(10, 5, 3, 9);
        auto b = random_cross_baseline(10, 5, 3, 9);
        REQUIRE(a.size() == 5);
        std::set<std::vector<std::size_t>> subsets;
        for (std::size_t i = 0; i < 5; ++i) {
            CHECK(a[i].anchor == b[i].anchor);
            CHECK(a[i].partners == b[i].partners);
            CHECK(a[i].members_distinct());
            subsets.insert(a[i].member_multiset());
        }
        CHECK(subsets.size() == 5);
    }
    SECTION("clamps when asking for more than exists") {
        bool clamped = false;
        auto all = random_cross_baseline(3, 10, 2, 5, &clamped);
        CHECK(all.size() == 3);
        CHECK(clamped);
    }
}

TEST_CASE("per feature auc") {
    SECTION("a label-determining cross scores 1") {
        auto t = xor_table(10);
        CHECK(per_feature_auc(cross_of(0, {1}), t) == 1.0);
    }
    SECTION("an independent cross hovers at one half") {
        Rng rng(77);
        const std::size_t n = 2000;
        std::vector<std::int32_t> c0(n), c1(n);
        std::vector<std::uint8_t> y(n);
        for (std::size_t r = 0; r < n; ++r) {
            c0[r] = static_cast<std::int32_t>(rng.uniform_int(4));
            c1[r] = static_cast<std::int32_t>(rng.uniform_int(4));
            y[r] = rng.bernoulli(0.5) ? 1 : 0;
        }
        auto t = table_from_codes({c0, c1}, y);
        const double solo = per_feature_auc(cross_of(0, {1}), t);
        CHECK(solo > 0.45);
        CHECK(solo < 0.55);
    }
}

TEST_CASE("evaluation report shape") {
    CrossReportEntry e;
    e.members = {"a", "b"};
    e.score = 0.9;
    e.solo_auc = 0.8;
    auto j = eval_report_to_json("test+lr", 0.95, {e});
    CHECK(j["pipeline"] == "test+lr");
    CHECK(j["auc"] == 0.95);
    CHECK(j["n_crosses"] == 1);
    CHECK(j["per_cross"][0]["members"][1] == "b");
}
