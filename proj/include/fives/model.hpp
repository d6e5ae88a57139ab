#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "fives/autodiff.hpp"
#include "fives/data.hpp"
#include "fives/graph.hpp"
#include "fives/rng.hpp"

// The predictive network: per-feature embeddings, K-1 rounds of
// adjacency-weighted message passing with elementwise composition, and
// one sigmoid head per layer trained under a shared cross-entropy loss.

namespace fives::model {

inline constexpr const char* kEmbeddingsName = "W_F";
inline constexpr const char* kNodeTransformsName = "W_node";
inline constexpr double kAggregateEps = 1e-8;

inline std::string head_weight_name(std::size_t k) { return "W_head." + std::to_string(k); }
inline std::string head_bias_name(std::size_t k) { return "b_head." + std::to_string(k); }
inline std::string adj_logits_name(std::size_t k) { return "H." + std::to_string(k); }

enum class AdjacencyMode { Recursive, Independent };

inline const char* adjacency_mode_name(AdjacencyMode m) {
    return m == AdjacencyMode::Recursive ? "recursive" : "independent";
}

struct ModelDims {
    std::size_t m = 0;           // feature count
    std::size_t d = 0;           // embedding dimension
    std::size_t num_layers = 0;  // K: heads 0..K-1, trainable slices 1..K-1
    std::vector<std::int32_t> cardinalities;
    std::vector<std::size_t> vocab_offsets;
    std::size_t total_vocab = 0;

    static ModelDims from_cardinalities(std::vector<std::int32_t> cards, std::size_t num_layers,
                                        std::size_t d) {
        if (num_layers < 1) throw ConfigError("model: K must be >= 1");
        if (d < 1) throw ConfigError("model: embedding dimension must be >= 1");
        if (cards.empty()) throw ConfigError("model: no features");
        ModelDims dims;
        dims.m = cards.size();
        dims.d = d;
        dims.num_layers = num_layers;
        dims.cardinalities = std::move(cards);
        dims.vocab_offsets.reserve(dims.m);
        for (auto c : dims.cardinalities) {
            if (c < 1) throw ConfigError("model: empty vocabulary");
            dims.vocab_offsets.push_back(dims.total_vocab);
            dims.total_vocab += static_cast<std::size_t>(c);
        }
        return dims;
    }

    static ModelDims from_table(const data::EncodedTable& table, std::size_t num_layers,
                                std::size_t d) {
        return from_cardinalities(table.cardinalities(), num_layers, d);
    }
};

inline Tensor uniform_init(Rng& rng, std::vector<std::size_t> shape, double bound) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

// Theta: embeddings, per-node transforms, per-layer heads. Fan-based
// uniform init, biases zero.
inline void init_model_params(ad::ParamStore& params, const ModelDims& dims,
                              std::uint64_t seed) {
    Rng rng(seed);
    const double emb_bound = 1.0 / std::sqrt(static_cast<double>(dims.d));
    params.add(kEmbeddingsName, uniform_init(rng, {dims.total_vocab, dims.d}, emb_bound));
    params.add(kNodeTransformsName, uniform_init(rng, {dims.m, dims.d, dims.d}, emb_bound));
    const double head_bound = 1.0 / std::sqrt(static_cast<double>(dims.m * dims.d));
    for (std::size_t k = 0; k < dims.num_layers; ++k) {
        params.add(head_weight_name(k), uniform_init(rng, {dims.m * dims.d}, head_bound));
        params.add(head_bias_name(k), Tensor({1}));
    }
}

// H: zero logits, so every soft slice starts at 0.5.
inline void init_adjacency_params(ad::ParamStore& params, const ModelDims& dims) {
    for (std::size_t k = 1; k < dims.num_layers; ++k)
        params.add(adj_logits_name(k), Tensor({dims.m, dims.m}));
}

inline std::set<std::string> theta_param_names(const ModelDims& dims) {
    std::set<std::string> names = {kEmbeddingsName, kNodeTransformsName};
    for (std::size_t k = 0; k < dims.num_layers; ++k) {
        names.insert(head_weight_name(k));
        names.insert(head_bias_name(k));
    }
    return names;
}

inline std::set<std::string> adjacency_param_names(const ModelDims& dims) {
    std::set<std::string> names;
    for (std::size_t k = 1; k < dims.num_layers; ++k) names.insert(adj_logits_name(k));
    return names;
}

inline graph::AdjLogits adjacency_logits_snapshot(const ad::ParamStore& params,
                                                  const ModelDims& dims) {
    graph::AdjLogits h;
    h.num_layers = dims.num_layers;
    h.m = dims.m;
    for (std::size_t k = 1; k < dims.num_layers; ++k)
        h.trainable.push_back(params.value(adj_logits_name(k)));
    return h;
}

struct ForwardOptions {
    double tau = 1.0;
    bool rescale = true;    // temperature re-scale of trainable slices
    bool training = false;  // enables dropout
    double dropout = 0.0;
    std::uint64_t dropout_seed = 0;
    // Pass gradients through the binarized predecessor in the recursive
    // adjacency (surrogate gradient); off by default, where the
    // binarization is a constant during backward.
    bool straight_through = false;
};

struct ForwardResult {
    ad::Tape::Id loss = -1;
    std::vector<ad::Tape::Id> heads;      // per-layer probability vectors [B]
    std::vector<ad::Tape::Id> adj;        // trainable adjacency nodes (k = 1..K-1)
};

// Trainable adjacency slices on the tape. The recursive form multiplies
// sigmoid(H(k)) by the row-normalized binarization of the previous soft
// slice, which is treated as a constant during backward.
inline std::vector<ad::Tape::Id> adjacency_nodes(ad::Tape& tape, ad::ParamStore& params,
                                                 const ModelDims& dims, AdjacencyMode mode,
                                                 const std::vector<double>& thresholds,
                                                 const ForwardOptions& opt) {
    graph::check_thresholds(thresholds, dims.num_layers);
    std::vector<ad::Tape::Id> out;
    ad::Tape::Id prev = tape.constant(Tensor::identity(dims.m));
    for (std::size_t k = 1; k < dims.num_layers; ++k) {
        const auto sig = tape.sigmoid(tape.param(params, adj_logits_name(k)));
        ad::Tape::Id soft = sig;
        if (mode == AdjacencyMode::Recursive) {
            if (opt.straight_through) {
                soft = tape.straight_through_mix(prev, sig, thresholds[k - 1]);
            } else {
                Tensor mix = graph::normalized_binarized(tape.value(prev), thresholds[k - 1]);
                soft = tape.matmul_const_left(std::move(mix), sig);
            }
        }
        prev = soft;
        ad::Tape::Id used = soft;
        if (opt.rescale) used = tape.sigmoid(tape.scale(tape.logit(soft), 1.0 / opt.tau));
        out.push_back(used);
    }
    return out;
}

namespace detail {

inline std::vector<std::size_t> embedding_rows(const data::Batch& batch,
                                               const ModelDims& dims) {
    if (batch.size() == 0) throw ContractError("forward: empty batch");
    if (batch.m != dims.m) throw DimensionError("forward: batch has " + std::to_string(batch.m) +
                                                " features, model expects " +
                                                std::to_string(dims.m));
    std::vector<std::size_t> rows;
    rows.reserve(batch.size() * dims.m);
    for (std::size_t r = 0; r < batch.size(); ++r)
        for (std::size_t c = 0; c < dims.m; ++c) {
            const auto code = batch.code(r, c);
            if (code < 0 || code >= dims.cardinalities[c])
                throw DomainError("forward: code " + std::to_string(code) +
                                  " outside vocabulary of feature " + std::to_string(c));
            rows.push_back(dims.vocab_offsets[c] + static_cast<std::size_t>(code));
        }
    return rows;
}

inline Tensor dropout_mask(std::vector<std::size_t> shape, double rate, Rng& rng) {
    Tensor mask(std::move(shape));
    const double keep = 1.0 - rate;
    for (std::size_t i = 0; i < mask.size(); ++i)
        mask[i] = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
    return mask;
}

// Shared network body: embeddings -> messages -> K-1 weighted mixing
// layers -> one head per layer -> joint loss.
inline ForwardResult run_network(ad::Tape& tape, const data::Batch& batch,
                                 ad::ParamStore& params, const ModelDims& dims,
                                 const std::vector<ad::Tape::Id>& adj,
                                 const ForwardOptions& opt) {
    if (adj.size() + 1 != dims.num_layers)
        throw ContractError("forward: expected " + std::to_string(dims.num_layers - 1) +
                            " adjacency slices, got " + std::to_string(adj.size()));
    const std::size_t B = batch.size();
    Rng drop_rng(opt.dropout_seed);

    auto emb = tape.param(params, kEmbeddingsName);
    auto n0 = tape.reshape(tape.lookup_rows(emb, embedding_rows(batch, dims)),
                           {B, dims.m, dims.d});
    auto msg = tape.per_node_linear(n0, tape.param(params, kNodeTransformsName));

    ForwardResult result;
    auto head_of = [&](ad::Tape::Id n_k, std::size_t k) {
        auto z = tape.affine_rows(n_k, tape.param(params, head_weight_name(k)),
                                  tape.param(params, head_bias_name(k)));
        return tape.sigmoid(z);
    };

    result.adj = adj;
    result.heads.push_back(head_of(n0, 0));
    ad::Tape::Id n_prev = n0;
    for (std::size_t k = 1; k < dims.num_layers; ++k) {
        auto p = tape.weighted_mix(adj[k - 1], msg, kAggregateEps);
        auto n_k = tape.hadamard(p, n_prev);
        if (opt.training && opt.dropout > 0.0) {
            auto mask = tape.constant(dropout_mask({B, dims.m, dims.d}, opt.dropout, drop_rng));
            n_k = tape.hadamard(n_k, mask);
        }
        result.heads.push_back(head_of(n_k, k));
        n_prev = n_k;
    }
    result.loss = tape.bce_multi_head(result.heads, batch.labels);
    return result;
}

}  // namespace detail

// Forward with the adjacency derived from the trainable logits.
inline ForwardResult forward_search(ad::Tape& tape, const data::Batch& batch,
                                    ad::ParamStore& params, const ModelDims& dims,
                                    AdjacencyMode mode, const std::vector<double>& thresholds,
                                    const ForwardOptions& opt) {
    auto adj = adjacency_nodes(tape, params, dims, mode, thresholds, opt);
    return detail::run_network(tape, batch, params, dims, adj, opt);
}

// Forward with a fixed adjacency tensor (architecture evaluation,
// fine-tuning, inference).
inline ForwardResult forward_fixed(ad::Tape& tape, const data::Batch& batch,
                                   ad::ParamStore& params, const ModelDims& dims,
                                   const graph::AdjTensor& a, const ForwardOptions& opt) {
    if (a.num_layers() != dims.num_layers || a.m() != dims.m)
        throw DimensionError("forward: adjacency " + std::to_string(a.num_layers()) + "x" +
                             std::to_string(a.m()) + " vs model K=" +
                             std::to_string(dims.num_layers) + " m=" + std::to_string(dims.m));
    std::vector<ad::Tape::Id> adj;
    for (std::size_t k = 1; k < dims.num_layers; ++k)
        adj.push_back(tape.constant(a.slices[k]));
    return detail::run_network(tape, batch, params, dims, adj, opt);
}

// Model score: mean of the K head probabilities, dropout off.
inline std::vector<double> predict_scores(const data::Batch& batch, ad::ParamStore& params,
                                          const ModelDims& dims, const graph::AdjTensor& a) {
    ad::Tape tape;
    ForwardOptions opt;
    auto result = forward_fixed(tape, batch, params, dims, a, opt);
    std::vector<double> scores(batch.size(), 0.0);
    for (auto h : result.heads) {
        const Tensor& p = tape.value(h);
        for (std::size_t i = 0; i < scores.size(); ++i) scores[i] += p[i];
    }
    for (auto& s : scores) s /= static_cast<double>(dims.num_layers);
    return scores;
}

}  // namespace fives::model
