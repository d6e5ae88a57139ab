#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fives/csv.hpp"
#include "fives/data.hpp"
#include "fives/errors.hpp"
#include "fives/kernels.hpp"
#include "fives/tensor.hpp"
#include "fives/version.hpp"

namespace fives::graph {

enum class AdjMode { Soft, Binarized };

// K stacked m x m adjacency slices; slice 0 is the identity and is never
// learned. Entries live in [0,1].
struct AdjTensor {
    std::vector<Tensor> slices;
    AdjMode mode = AdjMode::Soft;

    std::size_t num_layers() const { return slices.size(); }
    std::size_t m() const { return slices.empty() ? 0 : slices[0].dim(0); }
    double at(std::size_t k, std::size_t i, std::size_t j) const {
        return slices[k].at(i, j);
    }

    void validate() const {
        if (slices.empty()) throw ContractError("adjacency: no slices");
        const std::size_t n = m();
        for (const auto& s : slices)
            if (s.rank() != 2 || s.dim(0) != n || s.dim(1) != n)
                throw DimensionError("adjacency: slice shape " + s.shape_str());
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (slices[0].at(i, j) != (i == j ? 1.0 : 0.0))
                    throw ContractError("adjacency: slice 0 must be the identity");
        for (const auto& s : slices)
            for (std::size_t i = 0; i < s.size(); ++i)
                if (s[i] < 0.0 || s[i] > 1.0)
                    throw ContractError("adjacency: entry outside [0,1]");
    }
};

// Learnable logits for slices 1..K-1 (slice 0 is pinned to the identity
// and receives no gradient).
struct AdjLogits {
    std::size_t num_layers = 0;  // K
    std::size_t m = 0;
    std::vector<Tensor> trainable;  // K-1 tensors [m,m], slice k = trainable[k-1]

    static AdjLogits zeros(std::size_t num_layers, std::size_t m) {
        if (num_layers < 1) throw ConfigError("adjacency: K must be >= 1");
        AdjLogits h;
        h.num_layers = num_layers;
        h.m = m;
        for (std::size_t k = 1; k < num_layers; ++k) h.trainable.emplace_back(Tensor({m, m}));
        return h;
    }

    void validate() const {
        if (num_layers < 1) throw ContractError("adjacency logits: K < 1");
        if (trainable.size() + 1 != num_layers)
            throw ContractError("adjacency logits: slice count mismatch");
        for (const auto& t : trainable)
            if (t.rank() != 2 || t.dim(0) != m || t.dim(1) != m)
                throw DimensionError("adjacency logits: slice shape " + t.shape_str());
    }
};

inline std::vector<double> uniform_thresholds(std::size_t num_layers, double value = 0.5) {
    return std::vector<double>(num_layers, value);
}

inline void check_thresholds(const std::vector<double>& thresholds, std::size_t num_layers) {
    if (thresholds.size() != num_layers)
        throw ConfigError("thresholds: expected " + std::to_string(num_layers) + " values, got " +
                          std::to_string(thresholds.size()));
    for (double t : thresholds)
        if (!(t > 0.0 && t < 1.0)) throw ConfigError("thresholds: values must lie in (0,1)");
}

// Entry >= threshold maps to 1 (ties bind upward). Slice 0 stays I.
inline Tensor binarize_slice(const Tensor& slice, double threshold) {
    Tensor out(slice.shape());
    for (std::size_t i = 0; i < slice.size(); ++i) out[i] = slice[i] >= threshold ? 1.0 : 0.0;
    return out;
}

inline AdjTensor binarize(const AdjTensor& a, const std::vector<double>& thresholds) {
    a.validate();
    check_thresholds(thresholds, a.num_layers());
    AdjTensor out;
    out.mode = AdjMode::Binarized;
    out.slices.push_back(Tensor::identity(a.m()));
    for (std::size_t k = 1; k < a.num_layers(); ++k)
        out.slices.push_back(binarize_slice(a.slices[k], thresholds[k]));
    return out;
}

// Row-normalized binarized predecessor: rows of binarize(prev) divided by
// their degree; a zero-degree row stays zero (degree treated as 1).
inline Tensor normalized_binarized(const Tensor& prev_slice, double threshold) {
    const std::size_t m = prev_slice.dim(0);
    Tensor phi = binarize_slice(prev_slice, threshold);
    for (std::size_t i = 0; i < m; ++i) {
        double deg = 0.0;
        for (std::size_t j = 0; j < m; ++j) deg += phi.at(i, j);
        if (deg > 1.0)
            for (std::size_t j = 0; j < m; ++j) phi.at(i, j) /= deg;
    }
    return phi;
}

// Recursive soft adjacency:
//   A(0) = I,  A(k) = D(k-1)^-1 phi(A(k-1)) sigmoid(H(k)).
// phi binarizes the previous soft slice at that layer's threshold; the
// result of each slice lies in [0,1].
inline AdjTensor compute_soft_adjacency(const AdjLogits& h,
                                        const std::vector<double>& thresholds) {
    h.validate();
    check_thresholds(thresholds, h.num_layers);
    AdjTensor a;
    a.mode = AdjMode::Soft;
    a.slices.push_back(Tensor::identity(h.m));
    for (std::size_t k = 1; k < h.num_layers; ++k) {
        const Tensor mix = normalized_binarized(a.slices[k - 1], thresholds[k - 1]);
        const Tensor sig = ad::sigmoid(h.trainable[k - 1]);
        Tensor slice({h.m, h.m});
        for (std::size_t i = 0; i < h.m; ++i)
            for (std::size_t l = 0; l < h.m; ++l) {
                const double w = mix.at(i, l);
                if (w == 0.0) continue;
                for (std::size_t j = 0; j < h.m; ++j) slice.at(i, j) += w * sig.at(l, j);
            }
        a.slices.push_back(std::move(slice));
    }
    return a;
}

// Ablation variant: every slice parameterized independently,
// A(k) = sigmoid(H(k)).
inline AdjTensor compute_independent_adjacency(const AdjLogits& h) {
    h.validate();
    AdjTensor a;
    a.mode = AdjMode::Soft;
    a.slices.push_back(Tensor::identity(h.m));
    for (const auto& t : h.trainable) a.slices.push_back(ad::sigmoid(t));
    return a;
}

inline double rescale_entry(double a, double tau) {
    return ad::sigmoid_scalar(ad::logit_scalar(a) / tau);
}

// Temperature sharpening a <- sigmoid(logit(a)/tau) on slices k >= 1;
// tau = 1 is the identity on (0,1) and tau -> 0 saturates toward {0,1}.
inline AdjTensor rescale(const AdjTensor& a, double tau) {
    if (tau <= 0.0) throw ConfigError("rescale: tau must be positive");
    AdjTensor out;
    out.mode = a.mode;
    out.slices.push_back(a.slices[0]);
    for (std::size_t k = 1; k < a.num_layers(); ++k) {
        Tensor s(a.slices[k].shape());
        for (std::size_t i = 0; i < s.size(); ++i) s[i] = rescale_entry(a.slices[k][i], tau);
        out.slices.push_back(std::move(s));
    }
    return out;
}

struct TemperatureSchedule {
    double tau_start = 1.0;
    double tau_end = 0.02;
    std::size_t total_steps = 0;
    enum class Shape { Linear, Exponential } shape = Shape::Linear;

    void validate() const {
        if (!(tau_end > 0.0) || tau_start < tau_end)
            throw ConfigError("temperature: need tau_start >= tau_end > 0");
    }

    double at(std::size_t step) const {
        if (total_steps == 0 || step >= total_steps) return tau_end;
        const double t = static_cast<double>(step) / static_cast<double>(total_steps);
        if (shape == Shape::Linear) return tau_start + (tau_end - tau_start) * t;
        return tau_start * std::pow(tau_end / tau_start, t);
    }
};

// A k-order interaction: anchor node plus one partner per layer 1..k-1.
struct CrossFeature {
    std::size_t anchor = 0;
    std::vector<std::size_t> partners;
    double score = 1.0;

    std::size_t order() const { return partners.size() + 1; }

    std::vector<std::size_t> member_multiset() const {
        std::vector<std::size_t> ms;
        ms.reserve(partners.size() + 1);
        ms.push_back(anchor);
        ms.insert(ms.end(), partners.begin(), partners.end());
        std::sort(ms.begin(), ms.end());
        return ms;
    }

    bool members_distinct() const {
        auto ms = member_multiset();
        return std::adjacent_find(ms.begin(), ms.end()) == ms.end();
    }
};

struct DeriveOptions {
    bool dedupe = true;
    std::size_t cap = 100000;
    // scores read from this tensor when given (the pre-binarization soft A)
    const AdjTensor* soft_scores = nullptr;
};

// Emits, for every anchor i and order k in [2, K], the crosses whose
// layer-l partner c_l satisfies A(l)[i, c_l] = 1 for l = 1..k-1. The
// score of a cross is the product of the soft entries along its path.
// Dedupe merges crosses with equal member multisets, keeping the best
// score.
inline std::vector<CrossFeature> derive_cross_features(const AdjTensor& binarized,
                                                       std::size_t max_order,
                                                       const DeriveOptions& opt = {}) {
    binarized.validate();
    if (binarized.mode != AdjMode::Binarized)
        throw ContractError("derive_cross_features: adjacency must be binarized");
    if (max_order > binarized.num_layers())
        throw ConfigError("derive_cross_features: max_order exceeds K");
    if (opt.soft_scores && (opt.soft_scores->num_layers() != binarized.num_layers() ||
                            opt.soft_scores->m() != binarized.m()))
        throw DimensionError("derive_cross_features: score tensor shape mismatch");

    const std::size_t m = binarized.m();

    // row supports per layer
    std::vector<std::vector<std::vector<std::size_t>>> support(binarized.num_layers());
    for (std::size_t k = 1; k < binarized.num_layers(); ++k) {
        support[k].resize(m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j)
                if (binarized.at(k, i, j) == 1.0) support[k][i].push_back(j);
    }

    // cost check before enumeration
    std::size_t predicted = 0;
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t chain = 1;
        for (std::size_t k = 2; k <= max_order; ++k) {
            chain *= support[k - 1][i].size();
            predicted += chain;
            if (predicted > opt.cap) {
                std::ostringstream os;
                os << "derive_cross_features: more than " << opt.cap
                   << " crosses; per-layer fan-out:";
                for (std::size_t l = 1; l < binarized.num_layers(); ++l) {
                    std::size_t edges = 0;
                    for (std::size_t r = 0; r < m; ++r) edges += support[l][r].size();
                    os << " layer" << l << "=" << edges;
                }
                throw CapError(os.str());
            }
            if (chain == 0) break;
        }
    }

    std::vector<CrossFeature> out;
    for (std::size_t i = 0; i < m; ++i) {
        std::vector<CrossFeature> frontier;  // paths of the previous order
        CrossFeature root;
        root.anchor = i;
        frontier.push_back(root);
        for (std::size_t k = 2; k <= max_order; ++k) {
            std::vector<CrossFeature> next;
            for (const auto& path : frontier)
                for (std::size_t j : support[k - 1][i]) {
                    CrossFeature c = path;
                    c.partners.push_back(j);
                    if (opt.soft_scores) c.score = path.score * opt.soft_scores->at(k - 1, i, j);
                    next.push_back(std::move(c));
                }
            out.insert(out.end(), next.begin(), next.end());
            frontier = std::move(next);
            if (frontier.empty()) break;
        }
    }

    if (!opt.dedupe) return out;

    std::map<std::vector<std::size_t>, CrossFeature> best;
    for (auto& c : out) {
        auto key = c.member_multiset();
        auto it = best.find(key);
        if (it == best.end() || c.score > it->second.score) best[key] = std::move(c);
    }
    std::vector<CrossFeature> merged;
    merged.reserve(best.size());
    for (auto& [key, c] : best) merged.push_back(std::move(c));
    std::sort(merged.begin(), merged.end(), [](const CrossFeature& a, const CrossFeature& b) {
        if (a.order() != b.order()) return a.order() < b.order();
        if (a.anchor != b.anchor) return a.anchor < b.anchor;
        return a.partners < b.partners;
    });
    return merged;
}

// ---------------------------------------------------------------------------
// Artifacts

inline nlohmann::ordered_json slice_to_json(const Tensor& s) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < s.dim(0); ++i) {
        nlohmann::ordered_json row = nlohmann::ordered_json::array();
        for (std::size_t j = 0; j < s.dim(1); ++j) row.push_back(s.at(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Tensor slice_from_json(const nlohmann::json& rows) {
    const std::size_t m = rows.size();
    Tensor s({m, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) s.at(i, j) = rows[i][j].get<double>();
    return s;
}

inline nlohmann::ordered_json adjacency_to_json(const AdjTensor& soft, const AdjTensor& bin,
                                                const std::vector<double>& thresholds,
                                                const std::vector<std::string>& feature_names) {
    nlohmann::ordered_json j;
    j["format_version"] = kAdjacencyFormatVersion;
    j["K"] = soft.num_layers();
    j["m"] = soft.m();
    j["thresholds"] = thresholds;
    j["feature_names"] = feature_names;
    nlohmann::ordered_json sj = nlohmann::ordered_json::array();
    for (const auto& s : soft.slices) sj.push_back(slice_to_json(s));
    j["soft_A"] = std::move(sj);
    nlohmann::ordered_json bj = nlohmann::ordered_json::array();
    for (const auto& s : bin.slices) bj.push_back(slice_to_json(s));
    j["binarized_A"] = std::move(bj);
    return j;
}

struct AdjacencyArtifact {
    AdjTensor soft;
    AdjTensor binarized;
    std::vector<double> thresholds;
    std::vector<std::string> feature_names;
};

inline AdjacencyArtifact adjacency_from_json(const nlohmann::json& j) {
    if (!j.contains("format_version") ||
        j.at("format_version").get<int>() != kAdjacencyFormatVersion)
        throw ParseError("adjacency artifact: unsupported format_version");
    AdjacencyArtifact art;
    art.thresholds = j.at("thresholds").get<std::vector<double>>();
    art.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    art.soft.mode = AdjMode::Soft;
    for (const auto& s : j.at("soft_A")) art.soft.slices.push_back(slice_from_json(s));
    art.binarized.mode = AdjMode::Binarized;
    for (const auto& s : j.at("binarized_A")) art.binarized.slices.push_back(slice_from_json(s));
    art.soft.validate();
    art.binarized.validate();
    return art;
}

struct CrossRecord {
    std::size_t order = 0;
    std::string anchor;
    std::vector<std::string> partners;
    double score = 0.0;
};

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

inline void write_cross_csv(const std::string& path, const std::vector<CrossFeature>& crosses,
                            const std::vector<std::string>& feature_names) {
    std::ostringstream os;
    os << "order,anchor_name,partner_names,score\n";
    os.precision(17);
    for (const auto& c : crosses) {
        std::string partners;
        for (std::size_t l = 0; l < c.partners.size(); ++l) {
            if (l) partners += "|";
            partners += feature_names.at(c.partners[l]);
        }
        os << c.order() << "," << csv_escape(feature_names.at(c.anchor)) << ","
           << csv_escape(partners) << "," << c.score << "\n";
    }
    data::write_text_atomic(path, os.str());
}

inline std::vector<CrossRecord> read_cross_csv(const std::string& path) {
    data::CsvReader reader(path);
    std::vector<std::string> fields;
    if (!reader.next_record(fields) || fields.size() != 4 || fields[0] != "order")
        throw ParseError("cross csv: bad header in " + path);
    std::vector<CrossRecord> out;
    while (reader.next_record(fields)) {
        if (fields.size() == 1 && fields[0].empty()) continue;
        if (fields.size() != 4) throw ParseError("cross csv: bad record in " + path);
        CrossRecord r;
        r.order = static_cast<std::size_t>(std::stoul(fields[0]));
        r.anchor = fields[1];
        std::stringstream ss(fields[2]);
        std::string part;
        while (std::getline(ss, part, '|'))
            if (!part.empty()) r.partners.push_back(part);
        r.score = std::stod(fields[3]);
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace fives::graph
