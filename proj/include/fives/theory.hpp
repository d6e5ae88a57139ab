#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "fives/errors.hpp"
#include "fives/rng.hpp"
#include "fives/tensor.hpp"

// Exact information-theoretic quantities for triples of Bernoulli
// variables (X1, X2, Y), and a randomized verifier for the bound
//   I(X1X2; Y) < 2C + log(2 rho^2 + 1)
// together with the intermediate quantities its proof relies on.
// Natural logarithm throughout.

namespace fives::theory {

// Full joint p(x1, x2, y): 8 non-negative cells summing to 1.
struct JointPMF {
    // p[x1][x2][y]
    double p[2][2][2] = {};

    double prior(int y) const {
        return p[0][0][y] + p[0][1][y] + p[1][0][y] + p[1][1][y];
    }

    // p(x1, x2 | y); caller must ensure prior(y) > 0.
    double conditional(int x1, int x2, int y) const { return p[x1][x2][y] / prior(y); }

    double sum() const { return prior(0) + prior(1); }

    void validate() const {
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
                for (int y = 0; y < 2; ++y)
                    if (p[a][b][y] < 0.0)
                        throw DomainError("pmf: negative cell");
        if (std::abs(sum() - 1.0) > 1e-9)
            throw DomainError("pmf: cells sum to " + std::to_string(sum()));
    }
};

// -log p with the 0 log 0 = 0 convention.
inline double neg_p_log_p(double p) {
    return p > 0.0 ? -p * std::log(p) : 0.0;
}

inline double entropy(const std::vector<double>& pmf) {
    double total = 0.0, h = 0.0;
    for (double p : pmf) {
        if (p < 0.0) throw DomainError("entropy: negative probability");
        total += p;
        h += neg_p_log_p(p);
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw DomainError("entropy: probabilities sum to " + std::to_string(total));
    return h;
}

// I(X;Y) = H(X) + H(Y) - H(X,Y) for a joint given as a rank-2 tensor.
inline double mutual_information(const Tensor& joint) {
    if (joint.rank() != 2) throw DimensionError("mutual_information: joint must be rank 2");
    const std::size_t r = joint.dim(0), c = joint.dim(1);
    double total = 0.0, hxy = 0.0;
    std::vector<double> px(r, 0.0), py(c, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            const double p = joint.at(i, j);
            if (p < 0.0) throw DomainError("mutual_information: negative probability");
            total += p;
            hxy += neg_p_log_p(p);
            px[i] += p;
            py[j] += p;
        }
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw DomainError("mutual_information: joint sums to " + std::to_string(total));
    double hx = 0.0, hy = 0.0;
    for (double p : px) hx += neg_p_log_p(p);
    for (double p : py) hy += neg_p_log_p(p);
    return hx + hy - hxy;
}

namespace detail {

inline Tensor joint_x1_y(const JointPMF& q) {
    Tensor j({2, 2});
    for (int a = 0; a < 2; ++a)
        for (int y = 0; y < 2; ++y) j.at(a, y) = q.p[a][0][y] + q.p[a][1][y];
    return j;
}

inline Tensor joint_x2_y(const JointPMF& q) {
    Tensor j({2, 2});
    for (int b = 0; b < 2; ++b)
        for (int y = 0; y < 2; ++y) j.at(b, y) = q.p[0][b][y] + q.p[1][b][y];
    return j;
}

// (X1,X2) flattened to four states against Y.
inline Tensor joint_pair_y(const JointPMF& q) {
    Tensor j({4, 2});
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
            for (int y = 0; y < 2; ++y) j.at(a * 2 + b, y) = q.p[a][b][y];
    return j;
}

inline Tensor joint_x1_x2(const JointPMF& q) {
    Tensor j({2, 2});
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) j.at(a, b) = q.p[a][b][0] + q.p[a][b][1];
    return j;
}

}  // namespace detail

// Pearson correlation of X1, X2 conditioned on Y=y via the closed form
//   (p00 p11 - p01 p10) / sqrt((p10+p11)(p00+p01)(p00+p10)(p01+p11))
// over conditional cells. Returns nullopt when a conditional marginal is
// degenerate (zero variance) or the class has zero mass.
inline std::optional<double> conditional_correlation(const JointPMF& q, int y) {
    const double py = q.prior(y);
    if (py <= 0.0) return std::nullopt;
    const double p00 = q.conditional(0, 0, y), p01 = q.conditional(0, 1, y);
    const double p10 = q.conditional(1, 0, y), p11 = q.conditional(1, 1, y);
    const double v = (p10 + p11) * (p00 + p01) * (p00 + p10) * (p01 + p11);
    if (v <= 0.0) return std::nullopt;
    return (p00 * p11 - p01 * p10) / std::sqrt(v);
}

// I(Z;Y) with Z = X1*X2, i.e. Z=1 iff X1=X2=1.
inline double product_variable_mi(const JointPMF& q) {
    Tensor j({2, 2});
    for (int y = 0; y < 2; ++y) {
        j.at(1, y) = q.p[1][1][y];
        j.at(0, y) = q.p[0][0][y] + q.p[0][1][y] + q.p[1][0][y];
    }
    return mutual_information(j);
}

struct Prop1Report {
    double mi_x1 = 0.0;       // I(X1;Y)
    double mi_x2 = 0.0;       // I(X2;Y)
    double c = 0.0;           // max(mi_x1, mi_x2) + margin
    double rho = 0.0;         // max over y of |corr(X1,X2|Y=y)|
    double lhs = 0.0;         // I(X1X2;Y), the product variable
    double rhs = 0.0;         // 2C + log(2 rho^2 + 1)
    double inv_d = 0.0;       // H(X1|Y)+H(X2|Y)-H(X1,X2|Y)
    double mi_pair = 0.0;     // I((X1,X2);Y)
    double mi_x1_x2 = 0.0;    // marginal I(X1;X2)
    bool holds = false;
};

// Evaluates the bound and the proof-step quantities. Throws DomainError
// when a conditional correlation is undefined (degenerate marginal);
// callers fuzzing random pmfs skip those samples.
inline Prop1Report prop1_check(const JointPMF& q, double c_margin) {
    if (c_margin <= 0.0) throw DomainError("prop1_check: C margin must be positive");
    q.validate();
    const auto rho0 = conditional_correlation(q, 0);
    const auto rho1 = conditional_correlation(q, 1);
    if (!rho0 || !rho1) throw DomainError("prop1_check: conditional correlation undefined");

    Prop1Report r;
    r.mi_x1 = mutual_information(detail::joint_x1_y(q));
    r.mi_x2 = mutual_information(detail::joint_x2_y(q));
    r.mi_pair = mutual_information(detail::joint_pair_y(q));
    r.mi_x1_x2 = mutual_information(detail::joint_x1_x2(q));
    r.c = std::max(r.mi_x1, r.mi_x2) + c_margin;
    r.rho = std::max(std::abs(*rho0), std::abs(*rho1));
    r.lhs = product_variable_mi(q);

    // 1/d as the Y-averaged conditional-entropy overlap.
    double inv_d = 0.0;
    for (int y = 0; y < 2; ++y) {
        const double py = q.prior(y);
        if (py <= 0.0) continue;
        std::vector<double> x1m = {q.conditional(0, 0, y) + q.conditional(0, 1, y),
                                   q.conditional(1, 0, y) + q.conditional(1, 1, y)};
        std::vector<double> x2m = {q.conditional(0, 0, y) + q.conditional(1, 0, y),
                                   q.conditional(0, 1, y) + q.conditional(1, 1, y)};
        std::vector<double> pair = {q.conditional(0, 0, y), q.conditional(0, 1, y),
                                    q.conditional(1, 0, y), q.conditional(1, 1, y)};
        inv_d += py * (entropy(x1m) + entropy(x2m) - entropy(pair));
    }
    r.inv_d = inv_d;

    r.rhs = 2.0 * r.c + std::log1p(2.0 * r.rho * r.rho);
    r.holds = r.lhs < r.rhs;
    return r;
}

enum class PmfMode { DirichletGeneral, ConditionalProduct };

inline const char* pmf_mode_name(PmfMode m) {
    return m == PmfMode::DirichletGeneral ? "dirichlet-general" : "conditional-product";
}

// dirichlet-general: flat Dirichlet over all 8 cells.
// conditional-product: X1 and X2 independent given Y, which forces the
// conditional correlations to zero.
inline JointPMF sample_random_pmf(std::uint64_t seed, PmfMode mode) {
    Rng rng(seed);
    JointPMF q;
    if (mode == PmfMode::DirichletGeneral) {
        double total = 0.0;
        double g[8];
        for (double& v : g) {
            v = rng.exponential();
            total += v;
        }
        int i = 0;
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
                for (int y = 0; y < 2; ++y) q.p[a][b][y] = g[i++] / total;
    } else {
        const double prior1 = rng.uniform();
        for (int y = 0; y < 2; ++y) {
            const double py = (y == 1) ? prior1 : 1.0 - prior1;
            const double a = rng.uniform();  // P(X1=1 | y)
            const double b = rng.uniform();  // P(X2=1 | y)
            q.p[0][0][y] = py * (1.0 - a) * (1.0 - b);
            q.p[0][1][y] = py * (1.0 - a) * b;
            q.p[1][0][y] = py * a * (1.0 - b);
            q.p[1][1][y] = py * a * b;
        }
    }
    return q;
}

struct FuzzReport {
    std::uint64_t n_samples = 0;
    std::uint64_t n_skipped_degenerate = 0;
    std::uint64_t n_violations = 0;
    std::uint64_t n_additivity_failures = 0;  // exact-identity residual > tol
    std::uint64_t n_overlap_failures = 0;     // 1/d <= log(2 rho^2 + 1) + tol
    double max_ratio = 0.0;                   // max lhs/rhs over valid samples
    JointPMF tightest_sample;                 // the sample attaining max_ratio
};

struct FuzzOptions {
    double c_margin = 1e-9;
    double identity_tol = 1e-10;
    unsigned n_threads = 1;
};

namespace detail {

struct ChunkStats {
    FuzzReport rep;
    bool has_tightest = false;
};

inline void fuzz_one(std::uint64_t sample_seed, PmfMode mode, const FuzzOptions& opt,
                     ChunkStats& s) {
    const JointPMF q = sample_random_pmf(sample_seed, mode);
    ++s.rep.n_samples;
    Prop1Report r;
    try {
        r = prop1_check(q, opt.c_margin);
    } catch (const DomainError&) {
        ++s.rep.n_skipped_degenerate;
        return;
    }
    if (!r.holds) ++s.rep.n_violations;
    // Exact chain identity: I(X1;Y) + I(X2;Y) + 1/d - I(X1;X2) = I((X1,X2);Y).
    const double residual = r.mi_x1 + r.mi_x2 + r.inv_d - r.mi_x1_x2 - r.mi_pair;
    if (std::abs(residual) > opt.identity_tol) ++s.rep.n_additivity_failures;
    if (r.inv_d > std::log1p(2.0 * r.rho * r.rho) + opt.identity_tol)
        ++s.rep.n_overlap_failures;
    const double ratio = r.lhs / r.rhs;
    if (!s.has_tightest || ratio > s.rep.max_ratio) {
        s.rep.max_ratio = ratio;
        s.rep.tightest_sample = q;
        s.has_tightest = true;
    }
}

inline void merge(FuzzReport& into, bool& into_has, const ChunkStats& c) {
    into.n_samples += c.rep.n_samples;
    into.n_skipped_degenerate += c.rep.n_skipped_degenerate;
    into.n_violations += c.rep.n_violations;
    into.n_additivity_failures += c.rep.n_additivity_failures;
    into.n_overlap_failures += c.rep.n_overlap_failures;
    if (c.has_tightest && (!into_has || c.rep.max_ratio > into.max_ratio)) {
        into.max_ratio = c.rep.max_ratio;
        into.tightest_sample = c.rep.tightest_sample;
        into_has = true;
    }
}

}  // namespace detail

// Runs n samples of one mode. Per-sample seeds derive from (seed, index),
// so chunked execution merges to the same result in any thread count.
inline FuzzReport run_prop1_fuzz(std::uint64_t n, std::uint64_t seed, PmfMode mode,
                                 const FuzzOptions& opt = {}) {
    const unsigned hw = std::max(1u, opt.n_threads);
    Rng seeder(seed);
    const std::uint64_t stream = seeder.next_u64();

    auto sample_seed = [stream](std::uint64_t i) {
        return stream ^ (0x9e3779b97f4a7c15ULL * (i + 1));
    };

    FuzzReport total;
    bool total_has = false;
    if (hw == 1 || n < 4096) {
        detail::ChunkStats s;
        for (std::uint64_t i = 0; i < n; ++i) detail::fuzz_one(sample_seed(i), mode, opt, s);
        detail::merge(total, total_has, s);
        return total;
    }

    const unsigned workers = hw;
    std::vector<detail::ChunkStats> stats(workers);
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        threads.emplace_back([&, w] {
            const std::uint64_t lo = n * w / workers, hi = n * (w + 1) / workers;
            for (std::uint64_t i = lo; i < hi; ++i)
                detail::fuzz_one(sample_seed(i), mode, opt, stats[w]);
        });
    }
    for (auto& t : threads) t.join();
    for (const auto& s : stats) detail::merge(total, total_has, s);
    return total;
}

inline nlohmann::ordered_json pmf_to_json(const JointPMF& q) {
    nlohmann::ordered_json cells = nlohmann::ordered_json::array();
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
            for (int y = 0; y < 2; ++y)
                cells.push_back({{"x1", a}, {"x2", b}, {"y", y}, {"p", q.p[a][b][y]}});
    return cells;
}

inline nlohmann::ordered_json fuzz_report_to_json(const FuzzReport& r) {
    nlohmann::ordered_json j;
    j["n_samples"] = r.n_samples;
    j["n_skipped_degenerate"] = r.n_skipped_degenerate;
    j["n_violations"] = r.n_violations;
    j["n_additivity_failures"] = r.n_additivity_failures;
    j["n_overlap_failures"] = r.n_overlap_failures;
    j["max_ratio"] = r.max_ratio;
    j["tightest_sample"] = pmf_to_json(r.tightest_sample);
    return j;
}

}  // namespace fives::theory
