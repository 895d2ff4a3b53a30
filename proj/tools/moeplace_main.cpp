// SPDX-License-Identifier: Apache-2.0
//
// moeplace: planner + trace-driven simulator for multi-node MoE decode.
// Subcommands: synth, analyze, cluster, place, simulate, classify, pipeline.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "moeplace/config.hpp"
#include "moeplace/pipeline.hpp"
#include "moeplace/text.hpp"

namespace fs = std::filesystem;
using namespace moeplace;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::optional<std::uint64_t> seed;
    bool verbose = false;
};

void log_verbose(const GlobalArgs &args, const std::string &msg) {
    if (args.verbose)
        std::cerr << "[moeplace] " << msg << '\n';
}

RunConfig load_config(const GlobalArgs &args) {
    if (args.config_path.empty())
        throw ConfigError("--config is required for this subcommand");
    RunConfig config = load_run_config(args.config_path);
    if (args.seed) {
        config.synthetic.seed = *args.seed;
        config.clustering.seed = *args.seed;
        config.placement.seed = *args.seed;
        config.simulation.seed = *args.seed;
        config.classifier.split.seed = *args.seed;
        config.classifier.train.seed = *args.seed;
    }
    return config;
}

void require_valid(const RunConfig &config) {
    auto violations = validate_config(config);
    if (violations.empty())
        return;
    std::string msg = "invalid config:";
    for (const auto &v : violations)
        msg += "\n  - " + v;
    throw ConfigError(msg);
}

void ensure_out_dir(const std::string &out_dir) { fs::create_directories(out_dir); }

// "label=path" or bare path (label then comes from the file stem, with any
// leading "placement_" stripped).
std::pair<std::string, std::string> split_placement_arg(const std::string &arg) {
    auto eq = arg.find('=');
    if (eq != std::string::npos)
        return {arg.substr(0, eq), arg.substr(eq + 1)};
    std::string stem = fs::path(arg).stem().string();
    if (stem.rfind("placement_", 0) == 0)
        stem = stem.substr(10);
    return {stem, arg};
}

int cmd_synth(const GlobalArgs &args, const std::string &trace_out) {
    RunConfig config = load_config(args);
    if (!config.has_synthetic)
        throw ConfigError("synth: config has no 'synthetic' section");
    require_valid(config);
    auto records = generate_synthetic_trace(config.synthetic, config.model);
    std::string path = trace_out;
    if (path.empty()) {
        ensure_out_dir(args.out_dir);
        path = (fs::path(args.out_dir) / "trace.jsonl").string();
    }
    write_trace_file(records, path);
    std::cout << "wrote " << records.size() << " records to " << path << '\n';
    return 0;
}

int cmd_analyze(const GlobalArgs &args, const std::string &trace_path) {
    RunConfig config = load_config(args);
    ensure_out_dir(args.out_dir);
    auto records = read_trace_file(trace_path, config.model);
    log_verbose(args, "parsed " + std::to_string(records.size()) + " records");
    for (const auto &name : emit_analysis(records, config.model, args.out_dir))
        std::cout << "wrote " << (fs::path(args.out_dir) / name).string() << '\n';
    return 0;
}

int cmd_cluster(const GlobalArgs &args, const std::string &trace_path,
                std::optional<std::uint32_t> k, std::optional<std::uint32_t> d,
                std::optional<std::int32_t> layer, const std::string &stage) {
    RunConfig config = load_config(args);
    if (k)
        config.clustering.K = *k;
    if (layer)
        config.clustering.layer = *layer;
    if (!stage.empty())
        config.clustering.stage = stage_from_name(stage);
    std::uint32_t D = d ? *d : config.topology.ep;
    ensure_out_dir(args.out_dir);
    auto records = read_trace_file(trace_path, config.model);
    ClusterStage result = run_cluster_stage(records, config.model, config.clustering, D);
    log_verbose(args, "K=" + std::to_string(result.model.K) +
                          ", objective=" + fmt_double(result.model.objective, 6));
    for (const auto &name : emit_cluster_artifacts(result, args.out_dir))
        std::cout << "wrote " << (fs::path(args.out_dir) / name).string() << '\n';
    return 0;
}

// Rebuilds the clustering matrix and checks it matches the stored model, so
// standalone `place` operates on exactly the rows the model was fit on.
ClusterStage restore_cluster_stage(const RunConfig &config,
                                   const std::vector<ActivationRecord> &records,
                                   const std::string &model_path, std::uint32_t D) {
    std::ifstream in(model_path);
    if (!in)
        throw Error("cannot open cluster model: " + model_path);
    StoredClusterModel stored = parse_cluster_model(in);

    ClusterStage stage;
    if (config.clustering.layer < 0)
        stage.matrix = build_activation_matrix_summed(records, config.model.num_experts_per_layer,
                                                      config.clustering.stage);
    else
        stage.matrix = build_activation_matrix(records, config.model.num_experts_per_layer,
                                               static_cast<std::uint32_t>(config.clustering.layer),
                                               config.clustering.stage);
    if (stage.matrix.request_ids != stored.request_ids)
        throw ValidationError("cluster model was fit on different requests than this trace");
    if (stage.matrix.cols != stored.model.dim)
        throw ValidationError("cluster model dimension does not match the trace");
    stage.model = std::move(stored.model);
    stage.group_map = assign_clusters_to_groups(stage.model, stage.matrix, D,
                                                config.clustering.seed);
    return stage;
}

int cmd_place(const GlobalArgs &args, const std::string &trace_path,
              const std::string &model_path, const std::vector<std::string> &strategy_names,
              std::optional<std::uint32_t> d, std::optional<std::uint32_t> r) {
    RunConfig config = load_config(args);
    if (!strategy_names.empty()) {
        config.placement.strategies.clear();
        for (const auto &name : strategy_names)
            config.placement.strategies.push_back(strategy_from_name(name));
    }
    if (r)
        config.placement.R_redundancy = *r;
    std::uint32_t D = d ? *d : config.topology.ep;
    ensure_out_dir(args.out_dir);
    auto records = read_trace_file(trace_path, config.model);

    bool needs_model = false;
    for (PlacementStrategy s : config.placement.strategies)
        if (s == PlacementStrategy::data_based)
            needs_model = true;

    ClusterStage stage;
    if (needs_model || !model_path.empty()) {
        if (model_path.empty())
            throw ConfigError("place: --cluster-model is required for the data_based strategy");
        stage = restore_cluster_stage(config, records, model_path, D);
    } else {
        // baselines only: the matrix alone is enough
        if (config.clustering.layer < 0)
            stage.matrix = build_activation_matrix_summed(
                records, config.model.num_experts_per_layer, config.clustering.stage);
        else
            stage.matrix = build_activation_matrix(
                records, config.model.num_experts_per_layer,
                static_cast<std::uint32_t>(config.clustering.layer), config.clustering.stage);
        stage.group_map.D = D;
    }

    for (auto &entry : build_placements(stage, config.placement)) {
        std::string name = "placement_" + entry.label + ".txt";
        write_placement_file(entry.placement, (fs::path(args.out_dir) / name).string());
        std::cout << "wrote " << (fs::path(args.out_dir) / name).string() << '\n';
    }
    return 0;
}

int cmd_simulate(const GlobalArgs &args, const std::string &trace_path,
                 const std::vector<std::string> &placement_args,
                 const std::string &report_path, const std::string &topology_path,
                 const std::string &cost_path, std::optional<std::uint32_t> batches,
                 std::optional<std::uint32_t> batch_size, std::optional<std::uint32_t> layer) {
    RunConfig config = load_config(args);
    if (!topology_path.empty())
        config.topology = load_topology_config(topology_path);
    if (!cost_path.empty())
        config.cost = load_cost_config(cost_path);
    if (batches)
        config.simulation.batches = *batches;
    if (batch_size)
        config.simulation.batch_size = *batch_size;
    if (layer)
        config.simulation.layer = *layer;
    ensure_out_dir(args.out_dir);
    auto records = read_trace_file(trace_path, config.model);
    auto decode_matrix = build_activation_matrix(records, config.model.num_experts_per_layer,
                                                 config.simulation.layer, Stage::decode);

    std::vector<StrategyEntry> strategies;
    bool any_cluster_routed = false;
    for (const auto &arg : placement_args) {
        auto [label, path] = split_placement_arg(arg);
        StrategyEntry entry;
        entry.label = label;
        PlacementStrategy kind = PlacementStrategy::data_based;
        try {
            kind = strategy_from_name(label);
        } catch (const LookupError &) {
            // custom label: routed like a data-based placement
        }
        entry.placement = read_placement_file(path, kind);
        entry.cluster_routed = (kind == PlacementStrategy::data_based);
        any_cluster_routed = any_cluster_routed || entry.cluster_routed;
        strategies.push_back(std::move(entry));
    }
    if (strategies.empty())
        throw ConfigError("simulate: at least one --placement is required");

    std::vector<std::vector<std::uint32_t>> routes;
    if (any_cluster_routed) {
        if (report_path.empty())
            throw ConfigError("simulate: --cluster-report is required for data_based routing");
        std::ifstream in(report_path);
        if (!in)
            throw Error("cannot open cluster report: " + report_path);
        auto table = parse_cluster_report(in);
        routes.resize(decode_matrix.rows);
        for (std::size_t row = 0; row < decode_matrix.rows; ++row) {
            auto it = table.find(decode_matrix.request_ids[row]);
            if (it == table.end())
                throw LookupError("simulate: request " +
                                  std::to_string(decode_matrix.request_ids[row]) +
                                  " missing from cluster report");
            routes[row] = it->second;
        }
    }

    auto table = compare_strategies(decode_matrix, strategies, routes, config.topology,
                                    config.cost, config.simulation.batches,
                                    config.simulation.batch_size, config.simulation.seed);
    for (const auto &name : emit_simulation_artifacts(table, config.cost, args.out_dir))
        std::cout << "wrote " << (fs::path(args.out_dir) / name).string() << '\n';
    for (const auto &s : table.summary)
        std::cout << s.strategy << ": normalized median " << fmt_double(s.normalized_median, 6)
                  << '\n';
    return 0;
}

int cmd_classify(const GlobalArgs &args, const std::string &trace_path) {
    RunConfig config = load_config(args);
    ensure_out_dir(args.out_dir);
    auto records = read_trace_file(trace_path, config.model);
    auto report = per_layer_classification_report(records, config.model.num_experts_per_layer,
                                                  config.classifier.split,
                                                  config.classifier.train);
    std::string name = emit_classification_csv(report, args.out_dir);
    std::cout << "wrote " << (fs::path(args.out_dir) / name).string() << '\n';
    std::cout << "accuracy: " << fmt_double(report.mean_accuracy, 6) << " +/- "
              << fmt_double(report.stddev_accuracy, 6) << " across " << report.layers.size()
              << " layers\n";
    return 0;
}

int cmd_pipeline(const GlobalArgs &args, const std::string &trace_path) {
    RunConfig config = load_config(args);
    log_verbose(args, "running pipeline into " + args.out_dir);
    PipelineResult result = run_pipeline(config, trace_path, args.out_dir);
    if (!result.ok) {
        std::cerr << "stage '" << result.failed_stage << "' failed: " << result.error << '\n';
        return 1;
    }
    for (const auto &name : result.artifacts)
        std::cout << "wrote " << (fs::path(args.out_dir) / name).string() << '\n';
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"moeplace: MoE decode placement planner and all-to-all traffic simulator"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalArgs args;
    std::uint64_t seed_value = 0;
    auto *seed_opt = app.add_option("--seed", seed_value, "Override every seed in the config");
    app.add_option("--config", args.config_path, "Run configuration (JSON)");
    app.add_option("--out", args.out_dir, "Output directory (default: out)");
    app.add_flag("--verbose", args.verbose, "Progress logging on stderr");

    std::string trace_path, trace_out, model_path, report_path, stage_name_arg;
    std::string topology_path, cost_path;
    std::vector<std::string> strategy_names, placement_args;
    std::optional<std::uint32_t> opt_k, opt_d, opt_r, opt_batches, opt_batch_size, opt_layer;
    std::optional<std::int32_t> opt_cluster_layer;

    auto *synth = app.add_subcommand("synth", "Generate a synthetic trace with planted domains");
    synth->add_option("--trace-out", trace_out, "Trace file to write (default <out>/trace.jsonl)");

    auto *analyze = app.add_subcommand("analyze", "Imbalance factors and correlation matrices");
    analyze->add_option("--trace", trace_path, "Trace file (JSONL)")->required();

    auto *cluster = app.add_subcommand("cluster", "Cluster requests by activation pattern");
    cluster->add_option("--trace", trace_path, "Trace file (JSONL)")->required();
    cluster->add_option("--k", opt_k, "Cluster count (0 = one per dataset label)");
    cluster->add_option("--d", opt_d, "Expert group count (default: topology.ep)");
    cluster->add_option("--layer", opt_cluster_layer, "Restrict to one MoE layer (-1 = sum)");
    cluster->add_option("--stage", stage_name_arg, "prefill|decode (default decode)");

    auto *place = app.add_subcommand("place", "Compute expert placements");
    place->add_option("--trace", trace_path, "Trace file (JSONL)")->required();
    place->add_option("--cluster-model", model_path, "Model file from `cluster`");
    place->add_option("--strategy", strategy_names, "linear|eplb|data_based (repeatable)");
    place->add_option("--d", opt_d, "Expert group count (default: topology.ep)");
    place->add_option("--r", opt_r, "Redundancy budget (extra expert slots)");

    auto *simulate = app.add_subcommand("simulate", "Replay decode batches against placements");
    simulate->add_option("--trace", trace_path, "Trace file (JSONL)")->required();
    simulate->add_option("--placement", placement_args, "Placement file, or label=path")
        ->required();
    simulate->add_option("--cluster-report", report_path,
                         "cluster_report.csv (required for data_based routing)");
    simulate->add_option("--topology", topology_path,
                         "Topology config file (overrides the run config)");
    simulate->add_option("--cost", cost_path, "Cost model config file (overrides the run config)");
    simulate->add_option("--batches", opt_batches, "Number of sampled batches");
    simulate->add_option("--batch-size", opt_batch_size, "Requests per batch");
    simulate->add_option("--layer", opt_layer, "Simulated MoE layer");

    auto *classify = app.add_subcommand("classify", "Per-layer prefill dataset classification");
    classify->add_option("--trace", trace_path, "Trace file (JSONL)")->required();

    auto *pipeline = app.add_subcommand("pipeline", "Run every stage into one output directory");
    pipeline->add_option("--trace", trace_path,
                         "Trace file (optional when the config has a synthetic section)");

    CLI11_PARSE(app, argc, argv);
    if (seed_opt->count() > 0)
        args.seed = seed_value;

    try {
        if (synth->parsed())
            return cmd_synth(args, trace_out);
        if (analyze->parsed())
            return cmd_analyze(args, trace_path);
        if (cluster->parsed())
            return cmd_cluster(args, trace_path, opt_k, opt_d, opt_cluster_layer, stage_name_arg);
        if (place->parsed())
            return cmd_place(args, trace_path, model_path, strategy_names, opt_d, opt_r);
        if (simulate->parsed())
            return cmd_simulate(args, trace_path, placement_args, report_path, topology_path,
                                cost_path, opt_batches, opt_batch_size, opt_layer);
        if (classify->parsed())
            return cmd_classify(args, trace_path);
        if (pipeline->parsed())
            return cmd_pipeline(args, trace_path);
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
