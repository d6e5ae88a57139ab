// fives: differentiable cross-feature search over a feature graph, with
// an L1 logistic-regression consumer and an exact information-theoretic
// bound verifier. Batch CLI over on-disk artifacts; every command is
// deterministic given its seed.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fives/checkpoint.hpp"
#include "fives/data.hpp"
#include "fives/downstream.hpp"
#include "fives/gradcheck.hpp"
#include "fives/graph.hpp"
#include "fives/model.hpp"
#include "fives/search.hpp"
#include "fives/theory.hpp"
#include "fives/version.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerificationFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

std::string iso_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%FT%TZ", std::gmtime(&t));
    return buf;
}

unsigned env_num_threads() {
    const char* v = std::getenv("FIVES_NUM_THREADS");
    if (!v) return 1;
    const long n = std::strtol(v, nullptr, 10);
    return n > 0 ? static_cast<unsigned>(n) : 1;
}

struct Manifest {
    std::string command;
    std::uint64_t seed = 0;
    ordered_json inputs = ordered_json::object();
    ordered_json outputs = ordered_json::array();
    std::string started_at;

    void write(const fs::path& path) const {
        ordered_json j;
        j["command"] = command;
        j["tool_version"] = fives::kVersion;
        j["seed"] = seed;
        j["inputs"] = inputs;
        j["outputs"] = outputs;
        j["started_at"] = started_at;
        j["finished_at"] = iso_timestamp();
        fives::data::write_text_atomic(path.string(), j.dump(2) + "\n");
    }
};

void write_json(const fs::path& path, const ordered_json& j) {
    fives::data::write_text_atomic(path.string(), j.dump(2) + "\n");
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw fives::ConfigError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw fives::ParseError(path.string() + ": " + e.what());
    }
    return j;
}

// ---------------------------------------------------------------------------
// preprocess

struct PreprocessArgs {
    std::string csv, schema, out;
    bool multi_granularity = false;
    std::size_t min_freq = 5;
    std::vector<double> splits = {0.8, 0.1, 0.1};
    std::uint64_t seed = 0;
};

int cmd_preprocess(const PreprocessArgs& args) {
    Manifest manifest;
    manifest.command = "preprocess";
    manifest.seed = args.seed;
    manifest.started_at = iso_timestamp();
    manifest.inputs["csv"] = args.csv;
    manifest.inputs["schema"] = args.schema;

    if (args.splits.size() != 3)
        throw fives::ConfigError("--splits needs three fractions (train,val,test)");
    auto schema = fives::data::Schema::load_file(args.schema);
    auto raw = fives::data::load_csv(args.csv, schema);
    fives::data::PreprocessOptions opt;
    opt.multi_granularity = args.multi_granularity;
    opt.min_freq = args.min_freq;
    auto table = fives::data::encode_table(raw, opt);
    auto splits = fives::data::split_dataset(
        table, {args.splits[0], args.splits[1], args.splits[2]}, args.seed);

    fs::create_directories(args.out);
    const fs::path out(args.out);
    fives::data::save_table(splits.train, (out / "train.json").string());
    fives::data::save_table(splits.val, (out / "val.json").string());
    fives::data::save_table(splits.test, (out / "test.json").string());
    for (const char* name : {"train.json", "val.json", "test.json"})
        manifest.outputs.push_back((out / name).string());
    manifest.write(out / "manifest.json");

    std::cout << "preprocessed " << table.n_rows() << " rows, " << table.n_features()
              << " features -> " << splits.train.n_rows() << "/" << splits.val.n_rows() << "/"
              << splits.test.n_rows() << " split\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// search

struct SearchArgs {
    std::string data, config, out;
};

int cmd_search(const SearchArgs& args) {
    Manifest manifest;
    manifest.command = "search";
    manifest.started_at = iso_timestamp();
    manifest.inputs["data"] = args.data;
    manifest.inputs["config"] = args.config;

    auto config = fives::search::search_config_from_json(read_json(args.config));
    manifest.seed = config.seed;
    const fs::path data_dir(args.data);
    auto train = fives::data::load_table((data_dir / "train.json").string());
    auto val = fives::data::load_table((data_dir / "val.json").string());

    fs::create_directories(args.out);
    const fs::path out(args.out);
    std::ofstream metrics_log(out / "metrics.ndjson", std::ios::trunc);

    auto result = fives::search::fit(train, val, config, {},
                                     [&](const fives::search::EpochMetrics& m) {
                                         const auto line =
                                             fives::search::epoch_metrics_to_json(m).dump();
                                         std::cout << line << "\n";
                                         metrics_log << line << "\n";
                                     });
    metrics_log.close();

    write_json(out / "adjacency.json",
               fives::graph::adjacency_to_json(result.soft_a, result.binarized_a,
                                               config.effective_thresholds(),
                                               train.feature_names()));
    fives::ad::save_params(result.params, (out / "params.json").string());

    ordered_json sidecar;
    sidecar["format_version"] = 1;
    sidecar["K"] = config.num_layers;
    sidecar["m"] = result.dims.m;
    sidecar["d"] = config.embed_dim;
    sidecar["cardinalities"] = result.dims.cardinalities;
    sidecar["feature_names"] = train.feature_names();
    sidecar["tau_final"] = config.tau_final();
    sidecar["adjacency_mode"] = fives::model::adjacency_mode_name(config.adjacency_mode);
    write_json(out / "model.json", sidecar);
    write_json(out / "config.json", fives::search::search_config_to_json(config));

    for (const char* name : {"adjacency.json", "params.json", "metrics.ndjson", "model.json",
                             "config.json"})
        manifest.outputs.push_back((out / name).string());
    manifest.write(out / "manifest.json");
    return kExitOk;
}

// ---------------------------------------------------------------------------
// extract

struct ExtractArgs {
    std::string search_dir, out;
    std::vector<double> thresholds;  // empty -> artifact thresholds
    std::size_t cap = 100000;
};

int cmd_extract(const ExtractArgs& args) {
    Manifest manifest;
    manifest.command = "extract";
    manifest.started_at = iso_timestamp();
    manifest.inputs["search"] = args.search_dir;

    auto art = fives::graph::adjacency_from_json(
        read_json(fs::path(args.search_dir) / "adjacency.json"));
    const std::size_t num_layers = art.soft.num_layers();
    auto thresholds = args.thresholds;
    if (thresholds.empty())
        thresholds = art.thresholds;
    else if (thresholds.size() == 1)
        thresholds = fives::graph::uniform_thresholds(num_layers, thresholds[0]);
    fives::graph::check_thresholds(thresholds, num_layers);

    auto binarized = fives::graph::binarize(art.soft, thresholds);
    fives::graph::DeriveOptions opt;
    opt.dedupe = true;
    opt.cap = args.cap;
    opt.soft_scores = &art.soft;
    auto crosses = fives::graph::derive_cross_features(binarized, num_layers, opt);

    // only Definition-1-valid crosses (distinct members) feed downstream
    std::vector<fives::graph::CrossFeature> usable;
    for (auto& c : crosses)
        if (c.members_distinct()) usable.push_back(std::move(c));

    fives::graph::write_cross_csv(args.out, usable, art.feature_names);
    manifest.outputs.push_back(args.out);
    manifest.write(fs::path(args.out + ".manifest.json"));
    std::cout << "extracted " << usable.size() << " crosses\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// lr

struct LrArgs {
    std::string data, crosses, baseline = "none", out;
    std::size_t top_n = 10;
    std::size_t count = 10;
    std::size_t max_order = 2;
    std::uint64_t seed = 0;
    double l1 = 1.0;
    std::size_t max_iter = 100;
    double tol = 1e-6;
};

std::vector<fives::graph::CrossFeature> resolve_cross_records(
    const std::vector<fives::graph::CrossRecord>& records,
    const fives::data::EncodedTable& table) {
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t c = 0; c < table.n_features(); ++c) index[table.columns[c].name] = c;
    std::vector<fives::graph::CrossFeature> out;
    for (const auto& r : records) {
        fives::graph::CrossFeature c;
        auto find = [&](const std::string& name) {
            auto it = index.find(name);
            if (it == index.end())
                throw fives::ConfigError("crosses csv references unknown feature '" + name +
                                         "'");
            return it->second;
        };
        c.anchor = find(r.anchor);
        for (const auto& p : r.partners) c.partners.push_back(find(p));
        c.score = r.score;
        out.push_back(std::move(c));
    }
    return out;
}

int cmd_lr(const LrArgs& args) {
    Manifest manifest;
    manifest.command = "lr";
    manifest.seed = args.seed;
    manifest.started_at = iso_timestamp();
    manifest.inputs["data"] = args.data;
    manifest.inputs["baseline"] = args.baseline;
    if (!args.crosses.empty()) manifest.inputs["crosses"] = args.crosses;

    const fs::path data_dir(args.data);
    auto train = fives::data::load_table((data_dir / "train.json").string());
    auto val = fives::data::load_table((data_dir / "val.json").string());
    auto test = fives::data::load_table((data_dir / "test.json").string());
    auto fit_on = fives::data::concat_tables(train, val);

    std::string pipeline;
    std::vector<fives::graph::CrossFeature> crosses;
    if (!args.crosses.empty()) {
        pipeline = "fives+lr";
        crosses = resolve_cross_records(fives::graph::read_cross_csv(args.crosses), fit_on);
    } else if (args.baseline == "none") {
        pipeline = "lr";
    } else if (args.baseline == "random") {
        pipeline = "random+lr";
        crosses = fives::downstream::random_cross_baseline(fit_on.n_features(), args.count,
                                                           args.max_order, args.seed);
    } else if (args.baseline == "cmi") {
        pipeline = "cmi+lr";
        crosses = fives::downstream::cmi_rank_pairs(fit_on, args.top_n);
    } else {
        throw fives::ConfigError("unknown baseline '" + args.baseline + "'");
    }

    auto aug = fives::downstream::materialize_crosses_shared({&fit_on, &test}, crosses);
    fives::downstream::LRConfig lr_cfg;
    lr_cfg.l1 = args.l1;
    lr_cfg.max_iter = args.max_iter;
    lr_cfg.tol = args.tol;
    auto lr = fives::downstream::train_logistic_regression(aug[0], lr_cfg);
    const double test_auc = fives::downstream::auc(lr.scores(aug[1]), aug[1].labels);

    std::vector<fives::downstream::CrossReportEntry> entries;
    for (const auto& c : crosses) {
        fives::downstream::CrossReportEntry e;
        for (std::size_t m : c.member_multiset()) e.members.push_back(fit_on.columns[m].name);
        e.score = c.score;
        e.solo_auc = fives::downstream::per_feature_auc(c, test);
        entries.push_back(std::move(e));
    }
    auto report = fives::downstream::eval_report_to_json(pipeline, test_auc, entries);
    write_json(args.out, report);
    manifest.outputs.push_back(args.out);
    manifest.write(fs::path(args.out + ".manifest.json"));
    std::cout << pipeline << " test AUC " << test_auc << " (" << crosses.size()
              << " crosses)\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// prop1

struct Prop1Args {
    std::uint64_t n = 100000;
    std::uint64_t seed = 0;
    std::string mode = "both";
    double margin = 1e-9;
    std::string out;
};

int cmd_prop1(const Prop1Args& args) {
    Manifest manifest;
    manifest.command = "prop1";
    manifest.seed = args.seed;
    manifest.started_at = iso_timestamp();
    manifest.inputs["n"] = args.n;
    manifest.inputs["mode"] = args.mode;

    fives::theory::FuzzOptions opt;
    opt.c_margin = args.margin;
    opt.n_threads = env_num_threads();

    ordered_json report;
    report["n_requested"] = args.n;
    report["mode"] = args.mode;
    report["c_margin"] = args.margin;
    std::uint64_t violations = 0;

    report["runs"] = ordered_json::array();
    auto run_mode = [&](fives::theory::PmfMode mode, std::uint64_t n, std::uint64_t seed) {
        auto rep = fives::theory::run_prop1_fuzz(n, seed, mode, opt);
        violations += rep.n_violations + rep.n_additivity_failures + rep.n_overlap_failures;
        report["runs"].push_back(ordered_json{{"mode", fives::theory::pmf_mode_name(mode)},
                                              {"report", fives::theory::fuzz_report_to_json(rep)}});
    };
    if (args.mode == "both") {
        run_mode(fives::theory::PmfMode::DirichletGeneral, args.n / 2, args.seed);
        run_mode(fives::theory::PmfMode::ConditionalProduct, args.n - args.n / 2,
                 args.seed + 1);
    } else if (args.mode == "dirichlet-general") {
        run_mode(fives::theory::PmfMode::DirichletGeneral, args.n, args.seed);
    } else if (args.mode == "conditional-product") {
        run_mode(fives::theory::PmfMode::ConditionalProduct, args.n, args.seed);
    } else {
        throw fives::ConfigError("unknown mode '" + args.mode + "'");
    }
    report["total_violations"] = violations;

    if (!args.out.empty()) {
        write_json(args.out, report);
        manifest.outputs.push_back(args.out);
        manifest.write(fs::path(args.out + ".manifest.json"));
    } else {
        std::cout << report.dump(2) << "\n";
    }
    std::cout << "prop1: " << args.n << " samples, " << violations << " violations\n";
    return violations == 0 ? kExitOk : kExitVerificationFailure;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
    std::uint64_t seed = 0;
    double h = 1e-5;
    bool inject_sign_bug = false;
    std::string out;
};

int cmd_gradcheck(const GradcheckArgs& args) {
    // toy instance: three features, two embedding dims, two layers, four rows
    auto dims = fives::model::ModelDims::from_cardinalities({2, 3, 2}, 2, 2);
    fives::ad::ParamStore params;
    fives::model::init_model_params(params, dims, args.seed + 17);
    fives::model::init_adjacency_params(params, dims);
    fives::Rng rng(args.seed + 29);
    fives::Tensor& h_slice = params.value(fives::model::adj_logits_name(1));
    for (std::size_t i = 0; i < h_slice.size(); ++i) h_slice[i] = rng.uniform(-1.5, 1.5);

    fives::data::Batch batch;
    batch.m = 3;
    batch.codes = {0, 1, 0, 1, 2, 1, 0, 0, 1, 1, 1, 0};
    batch.labels = {1, 0, 0, 1};
    batch.indices = {0, 1, 2, 3};

    fives::model::ForwardOptions opt;
    opt.tau = 0.6;  // exercises the re-scaling path

    auto loss_fn = [&](fives::ad::ParamStore& p) {
        fives::ad::Tape t;
        return t.value(fives::model::forward_search(t, batch, p, dims,
                                                    fives::model::AdjacencyMode::Recursive,
                                                    fives::graph::uniform_thresholds(2), opt)
                           .loss)[0];
    };
    auto grad_fn = [&](fives::ad::ParamStore& p) {
        p.zero_grads();
        fives::ad::Tape t;
        t.backward(fives::model::forward_search(t, batch, p, dims,
                                                fives::model::AdjacencyMode::Recursive,
                                                fives::graph::uniform_thresholds(2), opt)
                       .loss);
        if (args.inject_sign_bug)
            for (std::size_t i = 0; i < p.size(); ++i) {
                auto& g = p.entry(i).grad;
                for (std::size_t k = 0; k < g.size(); ++k) g[k] = -g[k];
            }
    };

    auto report = fives::ad::finite_diff_check(loss_fn, grad_fn, params, args.h, 200, args.seed);

    ordered_json j;
    j["max_rel_err"] = report.max_rel_err;
    j["n_checked"] = report.n_checked;
    j["threshold"] = 1e-4;
    j["groups"] = ordered_json::array();
    for (const auto& g : report.groups)
        j["groups"].push_back(ordered_json{{"name", g.name},
                                           {"checked", g.checked},
                                           {"worst_coordinate", g.worst_index},
                                           {"max_rel_err", g.worst_rel_err},
                                           {"g_ad", g.g_ad},
                                           {"g_fd", g.g_fd}});
    if (!args.out.empty())
        write_json(args.out, j);
    else
        std::cout << j.dump(2) << "\n";

    const bool ok = report.max_rel_err < 1e-4;
    std::cout << "gradcheck: max relative error " << report.max_rel_err << " over "
              << report.n_checked << " coordinates -> " << (ok ? "PASS" : "FAIL") << "\n";
    return ok ? kExitOk : kExitVerificationFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"differentiable cross-feature search over a feature graph"};
    app.set_version_flag("--version", fives::kVersion);
    app.require_subcommand(1);

    PreprocessArgs pre;
    auto* sub_pre = app.add_subcommand("preprocess", "encode a csv into split table artifacts");
    sub_pre->add_option("--csv", pre.csv, "input csv path")->required();
    sub_pre->add_option("--schema", pre.schema, "schema json path")->required();
    sub_pre->add_option("--out", pre.out, "output directory")->required();
    sub_pre->add_flag("--multi-granularity", pre.multi_granularity,
                      "expand numeric columns into 10/100/1000 bucketings");
    sub_pre->add_option("--min-freq", pre.min_freq, "rare-category threshold (default 5)");
    sub_pre->add_option("--splits", pre.splits, "train,val,test fractions")->delimiter(',');
    sub_pre->add_option("--seed", pre.seed, "split seed");

    SearchArgs sea;
    auto* sub_sea = app.add_subcommand("search", "run the edge search on encoded splits");
    sub_sea->add_option("--data", sea.data, "directory from preprocess")->required();
    sub_sea->add_option("--config", sea.config, "search config json")->required();
    sub_sea->add_option("--out", sea.out, "output directory")->required();

    ExtractArgs ext;
    auto* sub_ext = app.add_subcommand("extract", "derive explicit crosses from a search run");
    sub_ext->add_option("--search", ext.search_dir, "directory from search")->required();
    sub_ext->add_option("--out", ext.out, "output csv path")->required();
    sub_ext->add_option("--thresholds", ext.thresholds,
                        "binarization thresholds (one value or one per layer)")
        ->delimiter(',');
    sub_ext->add_option("--cap", ext.cap, "max number of emitted crosses");

    LrArgs lr;
    auto* sub_lr = app.add_subcommand("lr", "train and evaluate the logistic regression");
    sub_lr->add_option("--data", lr.data, "directory from preprocess")->required();
    sub_lr->add_option("--crosses", lr.crosses, "crosses csv from extract");
    sub_lr->add_option("--baseline", lr.baseline, "none | random | cmi");
    sub_lr->add_option("--top-n", lr.top_n, "cmi: number of pairs");
    sub_lr->add_option("--count", lr.count, "random: number of crosses");
    sub_lr->add_option("--max-order", lr.max_order, "random: highest order");
    sub_lr->add_option("--seed", lr.seed, "random baseline seed");
    sub_lr->add_option("--l1", lr.l1, "l1 strength (default 1.0)");
    sub_lr->add_option("--max-iter", lr.max_iter, "iteration budget (default 100)");
    sub_lr->add_option("--tol", lr.tol, "stopping tolerance (default 1e-6)");
    sub_lr->add_option("--out", lr.out, "report json path")->required();

    Prop1Args p1;
    auto* sub_p1 = app.add_subcommand("prop1", "fuzz the interaction information bound");
    sub_p1->add_option("--n", p1.n, "number of sampled pmfs");
    sub_p1->add_option("--seed", p1.seed, "sampler seed");
    sub_p1->add_option("--mode", p1.mode, "both | dirichlet-general | conditional-product");
    sub_p1->add_option("--margin", p1.margin, "slack added to the max marginal MI");
    sub_p1->add_option("--out", p1.out, "report json path (stdout when omitted)");

    GradcheckArgs gc;
    auto* sub_gc = app.add_subcommand("gradcheck", "finite-difference check of the gradients");
    sub_gc->add_option("--seed", gc.seed, "fixture seed");
    sub_gc->add_option("--step", gc.h, "central difference step");
    sub_gc->add_flag("--inject-sign-bug", gc.inject_sign_bug,
                     "flip gradient signs to demonstrate detection");
    sub_gc->add_option("--out", gc.out, "report json path (stdout when omitted)");

    try {
        app.parse(argc, argv);
        if (sub_pre->parsed()) return cmd_preprocess(pre);
        if (sub_sea->parsed()) return cmd_search(sea);
        if (sub_ext->parsed()) return cmd_extract(ext);
        if (sub_lr->parsed()) return cmd_lr(lr);
        if (sub_p1->parsed()) return cmd_prop1(p1);
        if (sub_gc->parsed()) return cmd_gradcheck(gc);
        return kExitUsage;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    } catch (const fives::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const fives::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const fives::LabelError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const fives::NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
