#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "fives/data.hpp"
#include "fives/errors.hpp"
#include "fives/graph.hpp"
#include "fives/kernels.hpp"
#include "fives/rng.hpp"

// Downstream consumers of derived crosses: explicit materialization as
// categorical columns, an L1-regularized logistic regression, AUC, and
// the random / mutual-information baselines.

namespace fives::downstream {

// Probability that a random positive outranks a random negative; tied
// scores credit one half. Rank-summation form.
inline double auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
    if (scores.size() != labels.size())
        throw DimensionError("auc: " + std::to_string(scores.size()) + " scores vs " +
                             std::to_string(labels.size()) + " labels");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (auto y : labels) n_pos += y;
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw MetricError("auc: both classes must be present");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double pos_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double mean_rank = 0.5 * static_cast<double>(i + j + 1);  // 1-based tie average
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) pos_rank_sum += mean_rank;
        i = j;
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

// ---------------------------------------------------------------------------
// Cross materialization

struct MaterializeOptions {
    std::size_t max_cardinality = 100000;
};

inline std::string cross_column_name(const data::EncodedTable& table,
                                     const std::vector<std::size_t>& members) {
    std::string name = "cross(";
    for (std::size_t i = 0; i < members.size(); ++i) {
        if (i) name += "|";
        name += table.columns[members[i]].name;
    }
    return name + ")";
}

// One new categorical column per cross: the dense first-appearance
// re-encoding of the member code tuples. Original columns are retained
// untouched. All tables share one tuple dictionary so that cross codes
// stay aligned across train/val/test splits.
inline std::vector<data::EncodedTable> materialize_crosses_shared(
    const std::vector<const data::EncodedTable*>& tables,
    const std::vector<graph::CrossFeature>& crosses, const MaterializeOptions& opt = {}) {
    if (tables.empty()) throw ContractError("materialize: no tables");
    const std::size_t m_features = tables[0]->n_features();
    for (const auto* t : tables) {
        if (t->n_features() != m_features)
            throw DimensionError("materialize: tables disagree on feature count");
        for (std::size_t c = 0; c < m_features; ++c)
            if (t->columns[c].vocab != tables[0]->columns[c].vocab)
                throw ContractError("materialize: tables do not share vocab maps (column " +
                                    t->columns[c].name + ")");
    }

    std::vector<data::EncodedTable> out;
    out.reserve(tables.size());
    for (const auto* t : tables) out.push_back(*t);

    std::set<std::vector<std::size_t>> seen;
    for (const auto& cross : crosses) {
        auto members = cross.member_multiset();
        if (!cross.members_distinct())
            throw DomainError("materialize: cross members must be distinct original features");
        for (std::size_t m : members)
            if (m >= m_features)
                throw DomainError("materialize: feature index " + std::to_string(m) +
                                  " out of range");
        if (!seen.insert(members).second) continue;  // duplicate spec of the same cross

        std::map<std::vector<std::int32_t>, std::int32_t> dict;
        std::vector<std::string> vocab;
        std::vector<std::vector<std::int32_t>> codes(tables.size());
        for (std::size_t ti = 0; ti < tables.size(); ++ti) {
            const auto& table = *tables[ti];
            codes[ti].reserve(table.n_rows());
            for (std::size_t r = 0; r < table.n_rows(); ++r) {
                std::vector<std::int32_t> tuple;
                tuple.reserve(members.size());
                for (std::size_t m : members) tuple.push_back(table.columns[m].codes[r]);
                auto [it, inserted] =
                    dict.emplace(std::move(tuple), static_cast<std::int32_t>(vocab.size()));
                if (inserted) {
                    std::string raw;
                    for (std::size_t t = 0; t < members.size(); ++t) {
                        if (t) raw += "|";
                        raw += table.columns[members[t]].decode(it->first[t]);
                    }
                    vocab.push_back(std::move(raw));
                    if (vocab.size() > opt.max_cardinality)
                        throw CapError("materialize: cross " +
                                       cross_column_name(*tables[0], members) +
                                       " exceeds cardinality cap " +
                                       std::to_string(opt.max_cardinality));
                }
                codes[ti].push_back(it->second);
            }
        }
        for (std::size_t ti = 0; ti < tables.size(); ++ti) {
            data::EncodedColumn col;
            col.name = cross_column_name(*tables[0], members);
            col.vocab = vocab;
            col.codes = std::move(codes[ti]);
            out[ti].columns.push_back(std::move(col));
        }
    }
    for (auto& t : out) t.validate();
    return out;
}

inline data::EncodedTable materialize_crosses(const data::EncodedTable& table,
                                              const std::vector<graph::CrossFeature>& crosses,
                                              const MaterializeOptions& opt = {}) {
    return std::move(materialize_crosses_shared({&table}, crosses, opt).front());
}

// ---------------------------------------------------------------------------
// L1 logistic regression over one-hot encoded categories

struct LRConfig {
    double l1 = 1.0;  // penalty on the summed-loss scale
    std::size_t max_iter = 100;
    double tol = 1e-6;
};

struct LRModel {
    std::vector<double> weights;        // one per (feature, code)
    double bias = 0.0;
    std::vector<std::size_t> offsets;   // per-feature base index
    LRConfig config;
    std::size_t iterations = 0;
    std::vector<double> objective_trace;

    double score_row(const data::EncodedTable& table, std::size_t row) const {
        double z = bias;
        for (std::size_t c = 0; c < table.n_features(); ++c)
            z += weights[offsets[c] + static_cast<std::size_t>(table.columns[c].codes[row])];
        return ad::sigmoid_scalar(z);
    }

    std::vector<double> scores(const data::EncodedTable& table) const {
        if (table.n_features() != offsets.size())
            throw DimensionError("lr: table has " + std::to_string(table.n_features()) +
                                 " features, model expects " + std::to_string(offsets.size()));
        std::vector<double> s(table.n_rows());
        for (std::size_t r = 0; r < table.n_rows(); ++r) s[r] = score_row(table, r);
        return s;
    }
};

namespace detail {

struct LRProblem {
    const data::EncodedTable* table;
    std::vector<std::size_t> offsets;
    std::size_t dim = 0;  // total one-hot width (bias kept separate)

    double margin(std::size_t row, const std::vector<double>& w, double b) const {
        double z = b;
        for (std::size_t c = 0; c < table->n_features(); ++c)
            z += w[offsets[c] + static_cast<std::size_t>(table->columns[c].codes[row])];
        return z;
    }

    // mean logistic loss and its gradient
    double loss_grad(const std::vector<double>& w, double b, std::vector<double>* gw,
                     double* gb) const {
        const std::size_t n = table->n_rows();
        if (gw) std::fill(gw->begin(), gw->end(), 0.0);
        if (gb) *gb = 0.0;
        double loss = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            const double z = margin(r, w, b);
            const double y = static_cast<double>(table->labels[r]);
            // log(1 + exp(-|z|)) + max(0, -yz') stable form
            const double p = ad::sigmoid_scalar(z);
            loss += z >= 0 ? std::log1p(std::exp(-z)) + (1.0 - y) * z
                           : std::log1p(std::exp(z)) - y * z;
            if (gw) {
                const double err = (p - y) / static_cast<double>(n);
                for (std::size_t c = 0; c < table->n_features(); ++c)
                    (*gw)[offsets[c] + static_cast<std::size_t>(table->columns[c].codes[r])] +=
                        err;
                *gb += err;
            }
        }
        return loss / static_cast<double>(n);
    }

    // largest singular value of the one-hot design (bias column included)
    // by deterministic power iteration
    double spectral_norm_sq() const {
        const std::size_t n = table->n_rows();
        std::vector<double> v(dim + 1, 1.0);
        std::vector<double> xv(n), xtxv(dim + 1);
        double norm_sq = 1.0;
        for (int iter = 0; iter < 30; ++iter) {
            for (std::size_t r = 0; r < n; ++r) {
                double acc = v[dim];  // bias column
                for (std::size_t c = 0; c < table->n_features(); ++c)
                    acc += v[offsets[c] + static_cast<std::size_t>(table->columns[c].codes[r])];
                xv[r] = acc;
            }
            std::fill(xtxv.begin(), xtxv.end(), 0.0);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < table->n_features(); ++c)
                    xtxv[offsets[c] + static_cast<std::size_t>(table->columns[c].codes[r])] +=
                        xv[r];
                xtxv[dim] += xv[r];
            }
            double nrm = 0.0;
            for (double x : xtxv) nrm += x * x;
            nrm = std::sqrt(nrm);
            if (nrm == 0.0) return 1.0;
            norm_sq = nrm;  // Rayleigh growth factor approximates sigma_max^2
            for (std::size_t i = 0; i <= dim; ++i) v[i] = xtxv[i] / nrm;
        }
        return norm_sq;
    }
};

}  // namespace detail

// Proximal-gradient (monotone FISTA) minimization of
//   (1/N) sum_i logloss_i + (l1/N) ||w||_1
// with a fixed step from the power-iteration Lipschitz bound. The bias
// is unpenalized. Objective trace is non-increasing by construction.
inline LRModel train_logistic_regression(const data::EncodedTable& table,
                                         const LRConfig& config = {}) {
    if (table.n_rows() == 0) throw DegenerateDataError("lr: empty table");
    bool has0 = false, has1 = false;
    for (auto y : table.labels) (y ? has1 : has0) = true;
    if (!has0 || !has1) throw DegenerateDataError("lr: both classes must be present");

    detail::LRProblem prob;
    prob.table = &table;
    for (const auto& col : table.columns) {
        prob.offsets.push_back(prob.dim);
        prob.dim += static_cast<std::size_t>(col.cardinality());
    }

    const double n = static_cast<double>(table.n_rows());
    const double lambda = config.l1 / n;  // penalty on the mean-loss scale
    // 5% headroom on the power-iteration estimate, which converges from below
    const double lipschitz = 0.25 * 1.05 * prob.spectral_norm_sq() / n;
    const double step = 1.0 / std::max(lipschitz, 1e-12);

    std::vector<double> x(prob.dim, 0.0), x_prev(prob.dim, 0.0), y(prob.dim, 0.0);
    std::vector<double> z(prob.dim, 0.0), grad(prob.dim, 0.0);
    double xb = 0.0, xb_prev = 0.0, yb = 0.0, zb = 0.0, gb = 0.0;
    double t_momentum = 1.0;

    auto penalty = [&](const std::vector<double>& w) {
        double p = 0.0;
        for (double v : w) p += std::abs(v);
        return lambda * p;
    };
    auto shrink = [](double v, double thr) {
        if (v > thr) return v - thr;
        if (v < -thr) return v + thr;
        return 0.0;
    };

    double f_x = prob.loss_grad(x, xb, nullptr, nullptr) + penalty(x);
    LRModel model;
    model.config = config;
    model.offsets = prob.offsets;
    model.objective_trace.push_back(f_x);

    for (std::size_t iter = 0; iter < config.max_iter; ++iter) {
        prob.loss_grad(y, yb, &grad, &gb);
        for (std::size_t i = 0; i < prob.dim; ++i)
            z[i] = shrink(y[i] - step * grad[i], step * lambda);
        zb = yb - step * gb;

        const double f_z = prob.loss_grad(z, zb, nullptr, nullptr) + penalty(z);
        x_prev = x;
        xb_prev = xb;
        const double f_old = f_x;
        if (f_z <= f_x) {  // monotone safeguard
            x = z;
            xb = zb;
            f_x = f_z;
        }
        const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t_momentum * t_momentum));
        for (std::size_t i = 0; i < prob.dim; ++i)
            y[i] = x[i] + (t_momentum / t_next) * (z[i] - x[i]) +
                   ((t_momentum - 1.0) / t_next) * (x[i] - x_prev[i]);
        yb = xb + (t_momentum / t_next) * (zb - xb) +
             ((t_momentum - 1.0) / t_next) * (xb - xb_prev);
        t_momentum = t_next;

        model.objective_trace.push_back(f_x);
        model.iterations = iter + 1;
        if (std::abs(f_old - f_x) < config.tol) break;
    }

    model.weights = std::move(x);
    model.bias = xb;
    return model;
}

// ---------------------------------------------------------------------------
// Baselines and diagnostics

// Plug-in mutual information (natural log) between the joint category of
// a feature pair and the label, from empirical counts.
inline double pair_label_mi(const data::EncodedTable& table, std::size_t i, std::size_t j) {
    const auto ci = static_cast<std::size_t>(table.columns[i].cardinality());
    const auto cj = static_cast<std::size_t>(table.columns[j].cardinality());
    const std::size_t n = table.n_rows();
    std::vector<double> joint(ci * cj * 2, 0.0);
    std::vector<double> pz(ci * cj, 0.0);
    double py[2] = {0.0, 0.0};
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
        const auto zi = static_cast<std::size_t>(table.columns[i].codes[r]);
        const auto zj = static_cast<std::size_t>(table.columns[j].codes[r]);
        const std::size_t cell = zi * cj + zj;
        joint[cell * 2 + table.labels[r]] += inv_n;
        pz[cell] += inv_n;
        py[table.labels[r]] += inv_n;
    }
    double mi = 0.0;
    for (std::size_t cell = 0; cell < pz.size(); ++cell)
        for (int yv = 0; yv < 2; ++yv) {
            const double p = joint[cell * 2 + yv];
            if (p > 0.0) mi += p * std::log(p / (pz[cell] * py[yv]));
        }
    return mi;
}

// Ranks all unordered feature pairs by I(f_i (x) f_j ; Y), descending,
// ties broken by (i, j).
inline std::vector<graph::CrossFeature> cmi_rank_pairs(const data::EncodedTable& table,
                                                       std::size_t top_n) {
    if (top_n < 1) throw ConfigError("cmi_rank_pairs: top_n must be >= 1");
    const std::size_t m = table.n_features();
    struct Scored {
        std::size_t i, j;
        double mi;
    };
    std::vector<Scored> all;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = i + 1; j < m; ++j) all.push_back({i, j, pair_label_mi(table, i, j)});
    std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) {
        if (a.mi != b.mi) return a.mi > b.mi;
        if (a.i != b.i) return a.i < b.i;
        return a.j < b.j;
    });
    if (all.size() > top_n) all.resize(top_n);
    std::vector<graph::CrossFeature> out;
    for (const auto& s : all) {
        graph::CrossFeature c;
        c.anchor = s.i;
        c.partners = {s.j};
        c.score = s.mi;
        out.push_back(std::move(c));
    }
    return out;
}

// Uniformly sampled distinct feature subsets of size 2..max_order.
inline std::vector<graph::CrossFeature> random_cross_baseline(std::size_t m, std::size_t count,
                                                              std::size_t max_order,
                                                              std::uint64_t seed,
                                                              bool* clamped = nullptr) {
    if (count < 1) throw ConfigError("random_cross_baseline: count must be >= 1");
    if (max_order < 2) throw ConfigError("random_cross_baseline: max_order must be >= 2");
    max_order = std::min(max_order, m);

    // total number of candidate subsets, saturating
    double total = 0.0;
    for (std::size_t s = 2; s <= max_order; ++s) {
        double c = 1.0;
        for (std::size_t k = 0; k < s; ++k)
            c = c * static_cast<double>(m - k) / static_cast<double>(k + 1);
        total += c;
    }
    if (clamped) *clamped = false;

    Rng rng(seed);
    std::set<std::vector<std::size_t>> chosen;
    std::vector<graph::CrossFeature> out;
    auto push = [&](std::vector<std::size_t> subset) {
        std::sort(subset.begin(), subset.end());
        if (!chosen.insert(subset).second) return false;
        graph::CrossFeature c;
        c.anchor = subset[0];
        c.partners.assign(subset.begin() + 1, subset.end());
        c.score = 0.0;
        out.push_back(std::move(c));
        return true;
    };

    if (total <= static_cast<double>(count)) {
        // exhaustible: emit every subset
        std::vector<std::size_t> idx;
        for (std::size_t s = 2; s <= max_order; ++s) {
            idx.assign(s, 0);
            std::iota(idx.begin(), idx.end(), 0);
            while (true) {
                push(idx);
                std::size_t pos = s;
                while (pos > 0) {
                    if (++idx[pos - 1] <= m - (s - pos) - 1) {
                        for (std::size_t q = pos; q < s; ++q) idx[q] = idx[q - 1] + 1;
                        break;
                    }
                    --pos;
                }
                if (pos == 0) break;
            }
        }
        if (out.size() > count) out.resize(count);
        if (clamped && out.size() < count) *clamped = true;
        return out;
    }

    std::size_t guard = 0;
    while (out.size() < count && guard < 1000 * count) {
        ++guard;
        const std::size_t s = 2 + rng.uniform_int(max_order - 1);
        std::vector<std::size_t> subset;
        std::set<std::size_t> used;
        while (subset.size() < s) {
            const std::size_t f = rng.uniform_int(m);
            if (used.insert(f).second) subset.push_back(f);
        }
        push(std::move(subset));
    }
    if (clamped && out.size() < count) *clamped = true;
    return out;
}

// Single-feature predictor: Laplace-smoothed positive rate of the row's
// cross category, scored by AUC.
inline double per_feature_auc(const graph::CrossFeature& cross,
                              const data::EncodedTable& table) {
    data::EncodedTable one = materialize_crosses(table, {cross});
    const auto& col = one.columns.back();
    const auto card = static_cast<std::size_t>(col.cardinality());
    std::vector<double> pos(card, 0.0), cnt(card, 0.0);
    for (std::size_t r = 0; r < table.n_rows(); ++r) {
        const auto c = static_cast<std::size_t>(col.codes[r]);
        cnt[c] += 1.0;
        pos[c] += static_cast<double>(table.labels[r]);
    }
    std::vector<double> scores(table.n_rows());
    for (std::size_t r = 0; r < table.n_rows(); ++r) {
        const auto c = static_cast<std::size_t>(col.codes[r]);
        scores[r] = (pos[c] + 1.0) / (cnt[c] + 2.0);
    }
    return auc(scores, table.labels);
}

// ---------------------------------------------------------------------------
// Evaluation report

struct CrossReportEntry {
    std::vector<std::string> members;
    double score = 0.0;
    double solo_auc = 0.0;
};

inline nlohmann::ordered_json eval_report_to_json(const std::string& pipeline, double auc_value,
                                                  const std::vector<CrossReportEntry>& crosses) {
    nlohmann::ordered_json j;
    j["pipeline"] = pipeline;
    j["auc"] = auc_value;
    j["n_crosses"] = crosses.size();
    nlohmann::ordered_json list = nlohmann::ordered_json::array();
    for (const auto& c : crosses) {
        nlohmann::ordered_json cj;
        cj["members"] = c.members;
        cj["score"] = c.score;
        cj["solo_auc"] = c.solo_auc;
        list.push_back(std::move(cj));
    }
    j["per_cross"] = std::move(list);
    return j;
}

}  // namespace fives::downstream
