#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fives/data.hpp"
#include "fives/downstream.hpp"
#include "fives/graph.hpp"
#include "fives/model.hpp"
#include "fives/optim.hpp"

// Alternating bilevel optimization: model parameters descend the train
// loss, adjacency logits descend the validation loss, with the soft
// adjacency temperature annealed across steps.

namespace fives::search {

struct SearchConfig {
    std::size_t num_layers = 2;  // K
    std::size_t embed_dim = 8;   // d
    double lr_theta = 5e-3;      // alpha_1
    double lr_adj = 5e-3;        // alpha_2
    std::size_t epochs = 30;     // T
    std::size_t batch_size = 128;
    double weight_decay = 1e-4;
    double dropout = 0.3;
    double tau_start = 1.0;
    double tau_end = 0.02;
    graph::TemperatureSchedule::Shape tau_shape = graph::TemperatureSchedule::Shape::Linear;
    bool anneal = true;  // false pins tau at tau_start (re-scaling ablation)
    std::vector<double> thresholds;  // empty -> 0.5 per layer
    model::AdjacencyMode adjacency_mode = model::AdjacencyMode::Recursive;
    std::uint64_t seed = 0;
    // Recompute A before the H half-step. A depends on H alone, which a
    // Theta step never touches, so both settings produce identical runs;
    // the switch is kept so configs stating either intent parse.
    bool recompute_adjacency = true;
    // Surrogate gradients through the binarized predecessor slices.
    bool straight_through_phi = false;

    std::vector<double> effective_thresholds() const {
        return thresholds.empty() ? graph::uniform_thresholds(num_layers) : thresholds;
    }

    double tau_final() const { return anneal ? tau_end : tau_start; }

    void validate() const {
        if (num_layers < 1) throw ConfigError("search: K must be >= 1");
        if (embed_dim < 1) throw ConfigError("search: embedding dimension must be >= 1");
        if (lr_theta < 0 || lr_adj < 0) throw ConfigError("search: learning rates must be >= 0");
        if (epochs < 1) throw ConfigError("search: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("search: batch_size must be >= 1");
        if (dropout < 0 || dropout >= 1) throw ConfigError("search: dropout must be in [0,1)");
        if (!(tau_end > 0) || tau_start < tau_end)
            throw ConfigError("search: need tau_start >= tau_end > 0");
        if (!thresholds.empty()) graph::check_thresholds(thresholds, num_layers);
    }
};

inline nlohmann::ordered_json search_config_to_json(const SearchConfig& c) {
    nlohmann::ordered_json j;
    j["K"] = c.num_layers;
    j["d"] = c.embed_dim;
    j["alpha1"] = c.lr_theta;
    j["alpha2"] = c.lr_adj;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["l2"] = c.weight_decay;
    j["dropout"] = c.dropout;
    j["tau_start"] = c.tau_start;
    j["tau_end"] = c.tau_end;
    j["tau_shape"] =
        c.tau_shape == graph::TemperatureSchedule::Shape::Linear ? "linear" : "exponential";
    j["anneal"] = c.anneal;
    if (c.thresholds.empty())
        j["thresholds"] = nullptr;
    else
        j["thresholds"] = c.thresholds;
    j["adjacency_mode"] = model::adjacency_mode_name(c.adjacency_mode);
    j["seed"] = c.seed;
    j["recompute_adjacency"] = c.recompute_adjacency;
    j["straight_through_phi"] = c.straight_through_phi;
    return j;
}

inline SearchConfig search_config_from_json(const nlohmann::json& j) {
    SearchConfig c;
    auto get = [&](const char* key, auto& slot) {
        if (j.contains(key)) slot = j.at(key).template get<std::decay_t<decltype(slot)>>();
    };
    get("K", c.num_layers);
    get("d", c.embed_dim);
    get("alpha1", c.lr_theta);
    get("alpha2", c.lr_adj);
    get("epochs", c.epochs);
    get("batch_size", c.batch_size);
    get("l2", c.weight_decay);
    get("dropout", c.dropout);
    get("tau_start", c.tau_start);
    get("tau_end", c.tau_end);
    get("anneal", c.anneal);
    get("seed", c.seed);
    get("recompute_adjacency", c.recompute_adjacency);
    get("straight_through_phi", c.straight_through_phi);
    if (j.contains("tau_shape")) {
        const std::string s = j.at("tau_shape").get<std::string>();
        if (s == "linear")
            c.tau_shape = graph::TemperatureSchedule::Shape::Linear;
        else if (s == "exponential")
            c.tau_shape = graph::TemperatureSchedule::Shape::Exponential;
        else
            throw ConfigError("search config: unknown tau_shape '" + s + "'");
    }
    if (j.contains("thresholds") && !j.at("thresholds").is_null())
        c.thresholds = j.at("thresholds").get<std::vector<double>>();
    if (j.contains("adjacency_mode")) {
        const std::string s = j.at("adjacency_mode").get<std::string>();
        if (s == "recursive")
            c.adjacency_mode = model::AdjacencyMode::Recursive;
        else if (s == "independent")
            c.adjacency_mode = model::AdjacencyMode::Independent;
        else
            throw ConfigError("search config: unknown adjacency_mode '" + s + "'");
    }
    c.validate();
    return c;
}

struct EpochMetrics {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_auc = 0.0;
    double tau = 0.0;
    double seconds = 0.0;
};

inline nlohmann::ordered_json epoch_metrics_to_json(const EpochMetrics& m) {
    nlohmann::ordered_json j;
    j["epoch"] = m.epoch;
    j["train_loss"] = m.train_loss;
    j["val_loss"] = m.val_loss;
    j["val_auc"] = m.val_auc;
    j["tau"] = m.tau;
    return j;
}

struct SearchResult {
    graph::AdjTensor soft_a;       // from the final H, un-rescaled
    graph::AdjTensor binarized_a;  // soft_a under the recorded thresholds
    ad::ParamStore params;         // trained Theta plus final H
    model::ModelDims dims;
    std::vector<EpochMetrics> metrics;
    SearchConfig config;

    double final_val_auc() const { return metrics.empty() ? 0.0 : metrics.back().val_auc; }
};

struct StepInfo {
    std::size_t epoch = 0;
    std::size_t step = 0;  // global paired-step index
    double tau = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    ad::ParamStore* params = nullptr;
};

using StepObserver = std::function<void(const StepInfo&)>;
using EpochObserver = std::function<void(const EpochMetrics&)>;

namespace detail {

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
    Rng r(base ^ (0x9e3779b97f4a7c15ULL * (a + 1)) ^ (0xc2b2ae3d27d4eb4fULL * (b + 1)));
    return r.next_u64();
}

inline void check_tables(const data::EncodedTable& train, const data::EncodedTable& val) {
    if (train.n_features() < 2) throw ConfigError("search: need at least two features");
    if (train.n_rows() == 0 || val.n_rows() == 0)
        throw ConfigError("search: empty train or validation split");
    if (train.n_features() != val.n_features())
        throw ConfigError("search: train and validation disagree on feature count");
    for (std::size_t c = 0; c < train.n_features(); ++c)
        if (train.columns[c].vocab != val.columns[c].vocab)
            throw ConfigError("search: train and validation do not share vocab maps (column " +
                              train.columns[c].name + ")");
}

inline double finite_or_throw(double loss, std::size_t epoch, std::size_t step, double tau) {
    if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "search: non-finite loss at epoch " << epoch << ", step " << step << ", tau "
           << tau;
        throw NumericError(os.str());
    }
    return loss;
}

inline double eval_auc(const data::EncodedTable& split, ad::ParamStore& params,
                       const model::ModelDims& dims, const graph::AdjTensor& a) {
    auto batch = data::whole_table_batch(split);
    auto scores = model::predict_scores(batch, params, dims, a);
    return downstream::auc(scores, split.labels);
}

// Adjacency snapshot for evaluation: soft slices from the current H,
// sharpened at the given temperature.
inline graph::AdjTensor eval_adjacency(const ad::ParamStore& params,
                                       const model::ModelDims& dims, const SearchConfig& cfg,
                                       double tau) {
    auto h = model::adjacency_logits_snapshot(params, dims);
    auto soft = cfg.adjacency_mode == model::AdjacencyMode::Recursive
                    ? graph::compute_soft_adjacency(h, cfg.effective_thresholds())
                    : graph::compute_independent_adjacency(h);
    return graph::rescale(soft, tau);
}

}  // namespace detail

// One alternation loop over paired train/validation batches. Each paired
// step recomputes A from the current H, descends Theta on the train
// batch, recomputes A, and descends H on the validation batch. tau
// anneals across steps and reaches tau_end at the start of the final
// epoch; per-epoch metrics record the tau the epoch started with.
inline SearchResult fit(const data::EncodedTable& train, const data::EncodedTable& val,
                        const SearchConfig& config, const StepObserver& observer = {},
                        const EpochObserver& on_epoch = {}) {
    config.validate();
    detail::check_tables(train, val);

    SearchResult result;
    result.config = config;
    result.dims = model::ModelDims::from_table(train, config.num_layers, config.embed_dim);

    model::init_model_params(result.params, result.dims,
                             detail::derive_seed(config.seed, 1));
    model::init_adjacency_params(result.params, result.dims);

    const auto theta_names = model::theta_param_names(result.dims);
    const auto adj_names = model::adjacency_param_names(result.dims);
    ad::Optimizer theta_opt(ad::OptimRule::Adam, config.lr_theta, config.weight_decay);
    ad::Optimizer adj_opt(ad::OptimRule::Adam, config.lr_adj, 0.0);

    const std::size_t steps_per_epoch =
        (train.n_rows() + config.batch_size - 1) / config.batch_size;
    graph::TemperatureSchedule sched;
    sched.tau_start = config.tau_start;
    sched.tau_end = config.tau_end;
    sched.shape = config.tau_shape;
    sched.total_steps = (config.epochs - 1) * steps_per_epoch;
    sched.validate();

    const auto thresholds = config.effective_thresholds();
    std::size_t global_step = 0;

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        const double tau_epoch = config.anneal ? sched.at(global_step) : config.tau_start;

        auto train_batches = data::make_batches(train, config.batch_size, true,
                                                detail::derive_seed(config.seed, 2, epoch));
        auto val_batches = data::make_batches(val, config.batch_size, true,
                                              detail::derive_seed(config.seed, 3, epoch));

        double train_loss_sum = 0.0, val_loss_sum = 0.0;
        for (std::size_t i = 0; i < train_batches.size(); ++i) {
            const double tau = config.anneal ? sched.at(global_step) : config.tau_start;

            model::ForwardOptions opt;
            opt.tau = tau;
            opt.training = true;
            opt.dropout = config.dropout;
            opt.straight_through = config.straight_through_phi;

            // Theta half-step on the train batch
            double train_loss;
            {
                opt.dropout_seed = detail::derive_seed(config.seed, 4, global_step);
                ad::Tape tape;
                auto res = model::forward_search(tape, train_batches[i], result.params,
                                                 result.dims, config.adjacency_mode, thresholds,
                                                 opt);
                train_loss =
                    detail::finite_or_throw(tape.value(res.loss)[0], epoch, global_step, tau);
                tape.backward(res.loss);
                try {
                    theta_opt.step(result.params, theta_names);
                } catch (const NumericError& e) {
                    throw NumericError(std::string(e.what()) + " (epoch " +
                                       std::to_string(epoch) + ", step " +
                                       std::to_string(global_step) + ")");
                }
            }

            // H half-step on the next validation batch; A is recomputed
            // from H on this fresh tape either way.
            double val_loss;
            {
                const auto& vb = val_batches[i % val_batches.size()];
                opt.dropout_seed = detail::derive_seed(config.seed, 5, global_step);
                ad::Tape tape;
                auto res = model::forward_search(tape, vb, result.params, result.dims,
                                                 config.adjacency_mode, thresholds, opt);
                val_loss =
                    detail::finite_or_throw(tape.value(res.loss)[0], epoch, global_step, tau);
                if (config.num_layers > 1) {
                    tape.backward(res.loss);
                    try {
                        adj_opt.step(result.params, adj_names);
                    } catch (const NumericError& e) {
                        throw NumericError(std::string(e.what()) + " (epoch " +
                                           std::to_string(epoch) + ", step " +
                                           std::to_string(global_step) + ")");
                    }
                }
            }

            train_loss_sum += train_loss;
            val_loss_sum += val_loss;
            if (observer) {
                StepInfo info;
                info.epoch = epoch;
                info.step = global_step;
                info.tau = tau;
                info.train_loss = train_loss;
                info.val_loss = val_loss;
                info.params = &result.params;
                observer(info);
            }
            ++global_step;
        }

        EpochMetrics m;
        m.epoch = epoch;
        m.tau = tau_epoch;
        m.train_loss = train_loss_sum / static_cast<double>(train_batches.size());
        m.val_loss = val_loss_sum / static_cast<double>(train_batches.size());
        m.val_auc = detail::eval_auc(
            val, result.params, result.dims,
            detail::eval_adjacency(result.params, result.dims, config, tau_epoch));
        m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start)
                        .count();
        result.metrics.push_back(m);
        if (on_epoch) on_epoch(m);
    }

    auto h = model::adjacency_logits_snapshot(result.params, result.dims);
    result.soft_a = config.adjacency_mode == model::AdjacencyMode::Recursive
                        ? graph::compute_soft_adjacency(h, thresholds)
                        : graph::compute_independent_adjacency(h);
    result.binarized_a = graph::binarize(result.soft_a, thresholds);
    return result;
}

struct ArchitectureEval {
    ad::ParamStore params;
    model::ModelDims dims;
    double val_auc = 0.0;
    std::vector<double> train_losses;  // per epoch
};

namespace detail {

// Theta-only training under a fixed adjacency tensor.
inline ArchitectureEval train_theta_only(const graph::AdjTensor& a,
                                         const data::EncodedTable& train,
                                         const data::EncodedTable& val,
                                         const SearchConfig& config, ad::ParamStore initial,
                                         bool reinit, std::size_t epochs) {
    config.validate();
    check_tables(train, val);

    ArchitectureEval out;
    out.dims = model::ModelDims::from_table(train, config.num_layers, config.embed_dim);
    if (a.num_layers() != config.num_layers || a.m() != out.dims.m)
        throw ConfigError("architecture eval: adjacency shape does not match the config");

    if (reinit) {
        model::init_model_params(out.params, out.dims, derive_seed(config.seed, 11));
    } else {
        out.params = std::move(initial);
    }

    const auto theta_names = model::theta_param_names(out.dims);
    ad::Optimizer opt_rule(ad::OptimRule::Adam, config.lr_theta, config.weight_decay);

    std::size_t global_step = 0;
    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
        auto batches = data::make_batches(train, config.batch_size, true,
                                          derive_seed(config.seed, 12, epoch));
        double loss_sum = 0.0;
        for (const auto& b : batches) {
            model::ForwardOptions fopt;
            fopt.training = true;
            fopt.dropout = config.dropout;
            fopt.dropout_seed = derive_seed(config.seed, 13, global_step);
            ad::Tape tape;
            auto res = model::forward_fixed(tape, b, out.params, out.dims, a, fopt);
            const double loss = finite_or_throw(tape.value(res.loss)[0], epoch, global_step, 0);
            tape.backward(res.loss);
            opt_rule.step(out.params, theta_names);
            loss_sum += loss;
            ++global_step;
        }
        out.train_losses.push_back(loss_sum / static_cast<double>(batches.size()));
    }
    out.val_auc = eval_auc(val, out.params, out.dims, a);
    return out;
}

}  // namespace detail

// Architecture quality probe: Theta re-initialized and trained from
// scratch with the adjacency frozen.
inline ArchitectureEval learn_from_scratch(const graph::AdjTensor& a_fixed,
                                           const data::EncodedTable& train,
                                           const data::EncodedTable& val,
                                           const SearchConfig& config) {
    return detail::train_theta_only(a_fixed, train, val, config, ad::ParamStore{}, true,
                                    config.epochs);
}

// Continues Theta-only training from a search result, adjacency frozen
// at the result's final (temperature-sharpened) image. Zero extra epochs
// reproduce the result's final validation AUC.
inline ArchitectureEval fine_tune(const SearchResult& result, const data::EncodedTable& train,
                                  const data::EncodedTable& val, std::size_t extra_epochs) {
    auto a = graph::rescale(result.soft_a, result.config.tau_final());
    ad::ParamStore params;
    for (std::size_t i = 0; i < result.params.size(); ++i) {
        const auto& e = result.params.entry(i);
        params.add(e.name, e.value);
    }
    return detail::train_theta_only(a, train, val, result.config, std::move(params), false,
                                    extra_epochs);
}

// Bernoulli(density) slices above the identity, already binarized.
inline graph::AdjTensor random_adjacency(std::size_t m, std::size_t num_layers, double density,
                                         std::uint64_t seed) {
    if (!(density > 0.0) || density > 1.0)
        throw ConfigError("random_adjacency: density must be in (0,1]");
    if (num_layers < 1) throw ConfigError("random_adjacency: K must be >= 1");
    graph::AdjTensor a;
    a.mode = graph::AdjMode::Binarized;
    a.slices.push_back(Tensor::identity(m));
    Rng rng(seed);
    for (std::size_t k = 1; k < num_layers; ++k) {
        Tensor s({m, m});
        for (std::size_t i = 0; i < s.size(); ++i) s[i] = rng.bernoulli(density) ? 1.0 : 0.0;
        a.slices.push_back(std::move(s));
    }
    return a;
}

}  // namespace fives::search
