// SPDX-License-Identifier: Apache-2.0
#include "moeplace/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "moeplace/metrics.hpp"
#include "moeplace/text.hpp"

namespace moeplace {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::ofstream open_out(const std::string &out_dir, const std::string &name) {
    std::ofstream out(fs::path(out_dir) / name);
    if (!out)
        throw Error("cannot write " + name + " under " + out_dir);
    return out;
}

// Exclusive lock on the output directory; "wx" fails if the file exists.
class OutputLock {
  public:
    explicit OutputLock(const std::string &out_dir)
        : path_(fs::path(out_dir) / ".moeplace.lock") {
        std::FILE *f = std::fopen(path_.c_str(), "wx");
        if (!f)
            throw Error("output directory is locked by another run (remove " + path_.string() +
                        " if stale)");
        std::fclose(f);
    }
    ~OutputLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    OutputLock(const OutputLock &) = delete;
    OutputLock &operator=(const OutputLock &) = delete;

  private:
    fs::path path_;
};

void write_correlation_csv(const CorrelationMatrix &corr, std::ostream &out) {
    for (std::size_t i = 0; i < corr.size(); ++i)
        out << (i ? "," : "") << corr.labels[i];
    out << '\n';
    for (std::size_t i = 0; i < corr.size(); ++i) {
        for (std::size_t j = 0; j < corr.size(); ++j)
            out << (j ? "," : "") << fmt_double(corr.at(i, j));
        out << '\n';
    }
}

} // namespace

std::vector<std::string> emit_analysis(const std::vector<ActivationRecord> &records,
                                       const ModelConfig &model, const std::string &out_dir) {
    std::vector<std::string> artifacts;
    const std::uint32_t E = model.num_experts_per_layer;

    {
        auto out = open_out(out_dir, "imbalance.csv");
        out << "layer,stage,imbalance_factor\n";
        for (Stage stage : {Stage::prefill, Stage::decode}) {
            for (std::uint32_t layer : layers_present(records, stage)) {
                auto matrix = build_activation_matrix(records, E, layer, stage);
                std::vector<double> column_sums(E, 0.0);
                for (std::size_t r = 0; r < matrix.rows; ++r) {
                    auto row = matrix.row(r);
                    for (std::size_t e = 0; e < E; ++e)
                        column_sums[e] += row[e];
                }
                double factor = imbalance_factor(expert_load(column_sums, model.top_k));
                out << layer << ',' << stage_name(stage) << ',' << fmt_double(factor) << '\n';
            }
        }
        artifacts.push_back("imbalance.csv");
    }

    for (Stage stage : {Stage::prefill, Stage::decode}) {
        std::string name = std::string("dataset_correlation_") + stage_name(stage) + ".csv";
        try {
            auto matrix = build_activation_matrix_summed(records, E, stage);
            auto corr = dataset_correlation_matrix(matrix);
            auto out = open_out(out_dir, name);
            write_correlation_csv(corr, out);
            artifacts.push_back(name);
        } catch (const EmptySelectionError &) {
            // stage absent from the trace: skip its matrix
        } catch (const ValidationError &) {
            // fewer than 2 datasets: correlation matrix not defined
        }
    }

    {
        auto out = open_out(out_dir, "prefill_decode_correlation.csv");
        out << "layer,pearson\n";
        auto prefill_layers = layers_present(records, Stage::prefill);
        auto decode_layers = layers_present(records, Stage::decode);
        std::set<std::uint32_t> decode_set(decode_layers.begin(), decode_layers.end());
        for (std::uint32_t layer : prefill_layers) {
            if (!decode_set.count(layer))
                continue;
            auto prefill = build_activation_matrix(records, E, layer, Stage::prefill);
            auto decode = build_activation_matrix(records, E, layer, Stage::decode);
            double r;
            try {
                r = prefill_decode_correlation(prefill, decode);
            } catch (const UndefinedCorrelationError &) {
                r = std::nan("");
            }
            out << layer << ',' << fmt_double(r) << '\n';
        }
        artifacts.push_back("prefill_decode_correlation.csv");
    }
    return artifacts;
}

ClusterStage run_cluster_stage(const std::vector<ActivationRecord> &records,
                               const ModelConfig &model, const ClusteringConfig &clustering,
                               std::uint32_t D) {
    const std::uint32_t E = model.num_experts_per_layer;
    ClusterStage stage;
    if (clustering.layer < 0)
        stage.matrix = build_activation_matrix_summed(records, E, clustering.stage);
    else
        stage.matrix = build_activation_matrix(records, E,
                                               static_cast<std::uint32_t>(clustering.layer),
                                               clustering.stage);

    std::uint32_t K = clustering.K;
    if (K == 0) {
        std::set<std::string> labels(stage.matrix.row_labels.begin(),
                                     stage.matrix.row_labels.end());
        K = labels.empty() ? D : static_cast<std::uint32_t>(labels.size());
    }

    auto normalized = l2_normalize_rows(stage.matrix);
    std::uint32_t restarts = std::max<std::uint32_t>(clustering.restarts, 1);
    for (std::uint32_t attempt = 0; attempt < restarts; ++attempt) {
        auto candidate = kmeans(normalized.values, normalized.rows, normalized.cols, K,
                                clustering.seed + attempt, clustering.max_iterations,
                                clustering.tolerance);
        if (attempt == 0 || candidate.objective < stage.model.objective)
            stage.model = std::move(candidate);
    }
    stage.group_map = assign_clusters_to_groups(stage.model, stage.matrix, D, clustering.seed);
    return stage;
}

void write_cluster_report(const ClusterStage &stage, std::ostream &out) {
    out << "request_id,cluster,group_list\n";
    for (std::size_t r = 0; r < stage.matrix.rows; ++r) {
        std::uint32_t cluster = stage.model.labels[r];
        out << stage.matrix.request_ids[r] << ',' << cluster << ',';
        const auto &groups = stage.group_map.assignment[cluster];
        for (std::size_t i = 0; i < groups.size(); ++i)
            out << (i ? ";" : "") << groups[i];
        out << '\n';
    }
}

std::map<std::uint64_t, std::vector<std::uint32_t>> parse_cluster_report(std::istream &in) {
    std::map<std::uint64_t, std::vector<std::uint32_t>> routes;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line_no == 1 || line.empty())
            continue; // header
        std::istringstream ls(line);
        std::string request_field, cluster_field, groups_field;
        if (!std::getline(ls, request_field, ',') || !std::getline(ls, cluster_field, ',') ||
            !std::getline(ls, groups_field))
            throw ParseError(line_no, "expected request_id,cluster,group_list");
        try {
            std::uint64_t request_id = std::stoull(request_field);
            std::vector<std::uint32_t> groups;
            std::istringstream gs(groups_field);
            std::string part;
            while (std::getline(gs, part, ';'))
                groups.push_back(static_cast<std::uint32_t>(std::stoul(part)));
            if (groups.empty())
                throw ParseError(line_no, "empty group_list");
            routes[request_id] = std::move(groups);
        } catch (const ParseError &) {
            throw;
        } catch (const std::exception &e) {
            throw ParseError(line_no, e.what());
        }
    }
    return routes;
}

std::vector<std::string> emit_cluster_artifacts(const ClusterStage &stage,
                                                const std::string &out_dir) {
    {
        auto out = open_out(out_dir, "cluster_report.csv");
        write_cluster_report(stage, out);
    }
    {
        auto out = open_out(out_dir, "cluster_model.txt");
        write_cluster_model(stage.model, stage.matrix.request_ids, out);
    }
    return {"cluster_report.csv", "cluster_model.txt"};
}

std::vector<StrategyEntry> build_placements(const ClusterStage &stage,
                                            const PlacementConfig &placement) {
    const std::uint32_t E = static_cast<std::uint32_t>(stage.matrix.cols);
    const std::uint32_t D = stage.group_map.D;

    std::vector<StrategyEntry> entries;
    for (PlacementStrategy strategy : placement.strategies) {
        StrategyEntry entry;
        entry.label = strategy_name(strategy);
        switch (strategy) {
        case PlacementStrategy::linear:
            entry.placement = linear_placement(E, D);
            break;
        case PlacementStrategy::eplb: {
            std::vector<double> load(E, 0.0);
            for (std::size_t r = 0; r < stage.matrix.rows; ++r) {
                auto row = stage.matrix.row(r);
                for (std::size_t e = 0; e < E; ++e)
                    load[e] += row[e];
            }
            entry.placement = eplb_placement(load, E, D);
            break;
        }
        case PlacementStrategy::data_based: {
            UsageMatrix usage = aggregate_usage(stage.group_map, stage.matrix, stage.model, D);
            entry.placement = data_based_placement(usage, placement.R_redundancy, placement.seed);
            entry.cluster_routed = true;
            break;
        }
        }
        entries.push_back(std::move(entry));
    }
    return entries;
}

std::vector<std::vector<std::uint32_t>> routing_for_matrix(const ActivationMatrix &matrix,
                                                           std::span<const std::uint64_t> clustered_ids,
                                                           const ClusterModel &model,
                                                           const GroupMap &group_map) {
    std::vector<std::vector<std::uint32_t>> table(matrix.rows);
    for (std::size_t r = 0; r < matrix.rows; ++r)
        table[r] = route_request(matrix.request_ids[r], clustered_ids, model, group_map);
    return table;
}

std::vector<std::string> emit_simulation_artifacts(const ComparisonTable &table,
                                                   const CostModelParams &cost,
                                                   const std::string &out_dir) {
    {
        auto out = open_out(out_dir, "simulation.csv");
        out << "batch,strategy,inter_node_bytes,dispatch_s,compute_s,combine_s,layer_s,"
               "normalized\n";
        for (const auto &row : table.rows) {
            out << row.batch << ',' << row.strategy << ',' << fmt_double(row.sim.inter_node_bytes)
                << ',' << fmt_double(row.sim.dispatch_time) << ','
                << fmt_double(row.sim.expert_compute_time) << ','
                << fmt_double(row.sim.combine_time) << ',' << fmt_double(row.sim.layer_time)
                << ',' << fmt_double(row.normalized) << '\n';
        }
    }
    {
        auto out = open_out(out_dir, "simulation_summary.csv");
        out << "strategy,median_inter_node_bytes,q25_inter_node_bytes,q75_inter_node_bytes,"
               "normalized_median,median_dispatch_s,median_compute_s,median_combine_s,"
               "median_layer_s\n";
        for (const auto &s : table.summary) {
            out << s.strategy << ',' << fmt_double(s.median_inter_node_bytes) << ','
                << fmt_double(s.q25_inter_node_bytes) << ',' << fmt_double(s.q75_inter_node_bytes)
                << ',' << fmt_double(s.normalized_median) << ','
                << fmt_double(s.median_dispatch_time) << ','
                << fmt_double(s.median_expert_compute_time) << ','
                << fmt_double(s.median_combine_time) << ',' << fmt_double(s.median_layer_time)
                << '\n';
        }
    }
    {
        auto out = open_out(out_dir, "breakdown.csv");
        out << "strategy,dispatch_frac,compute_frac,combine_frac,overhead_frac,median_layer_s\n";
        for (const auto &row : latency_breakdown_report(table, cost)) {
            out << row.strategy << ',' << fmt_double(row.dispatch_fraction) << ','
                << fmt_double(row.compute_fraction) << ',' << fmt_double(row.combine_fraction)
                << ',' << fmt_double(row.overhead_fraction) << ','
                << fmt_double(row.median_layer_time) << '\n';
        }
    }
    return {"simulation.csv", "simulation_summary.csv", "breakdown.csv"};
}

std::string emit_classification_csv(const ClassificationReport &report,
                                    const std::string &out_dir) {
    auto out = open_out(out_dir, "classification.csv");
    out << "layer,accuracy,n_train,n_test\n";
    for (const auto &layer : report.layers) {
        out << layer.layer << ',' << (layer.ok ? fmt_double(layer.accuracy) : "nan") << ','
            << layer.n_train << ',' << layer.n_test << '\n';
    }
    return "classification.csv";
}

PipelineResult run_pipeline(const RunConfig &config, const std::string &trace_path,
                            const std::string &out_dir) {
    PipelineResult result;
    fs::create_directories(out_dir);

    std::map<std::string, std::string> stage_status;
    auto write_manifest = [&] {
        json manifest;
        manifest["stages"] = stage_status;
        std::vector<std::string> sorted = result.artifacts;
        std::sort(sorted.begin(), sorted.end());
        manifest["artifacts"] = sorted;
        auto out = open_out(out_dir, "manifest.json");
        out << manifest.dump(2) << '\n';
    };

    std::string current_stage = "setup";
    try {
        OutputLock lock(out_dir);

        current_stage = "config";
        auto violations = validate_config(config);
        if (!violations.empty()) {
            std::string msg = "invalid config:";
            for (const auto &v : violations)
                msg += "\n  - " + v;
            throw ConfigError(msg);
        }
        stage_status["config"] = "complete";

        current_stage = "trace";
        std::vector<ActivationRecord> records;
        if (!trace_path.empty()) {
            records = read_trace_file(trace_path, config.model);
        } else if (config.has_synthetic) {
            records = generate_synthetic_trace(config.synthetic, config.model);
            write_trace_file(records, (fs::path(out_dir) / "trace.jsonl").string());
            result.artifacts.push_back("trace.jsonl");
        } else {
            throw ConfigError("no trace path given and the config has no synthetic section");
        }
        if (records.empty())
            throw ValidationError("trace contains no records");
        stage_status["trace"] = "complete";

        current_stage = "analyze";
        for (auto &name : emit_analysis(records, config.model, out_dir))
            result.artifacts.push_back(std::move(name));
        stage_status["analyze"] = "complete";

        current_stage = "cluster";
        ClusterStage cluster =
            run_cluster_stage(records, config.model, config.clustering, config.topology.ep);
        for (auto &name : emit_cluster_artifacts(cluster, out_dir))
            result.artifacts.push_back(std::move(name));
        stage_status["cluster"] = "complete";

        current_stage = "place";
        auto strategies = build_placements(cluster, config.placement);
        for (const auto &entry : strategies) {
            std::string name = "placement_" + entry.label + ".txt";
            write_placement_file(entry.placement, (fs::path(out_dir) / name).string());
            result.artifacts.push_back(name);
        }
        stage_status["place"] = "complete";

        current_stage = "simulate";
        auto decode_matrix = build_activation_matrix(records, config.model.num_experts_per_layer,
                                                     config.simulation.layer, Stage::decode);
        auto routes = routing_for_matrix(decode_matrix, cluster.matrix.request_ids,
                                         cluster.model, cluster.group_map);
        auto table = compare_strategies(decode_matrix, strategies, routes, config.topology,
                                        config.cost, config.simulation.batches,
                                        config.simulation.batch_size, config.simulation.seed);
        for (auto &name : emit_simulation_artifacts(table, config.cost, out_dir))
            result.artifacts.push_back(std::move(name));
        stage_status["simulate"] = "complete";

        current_stage = "classify";
        auto report = per_layer_classification_report(records, config.model.num_experts_per_layer,
                                                      config.classifier.split,
                                                      config.classifier.train);
        result.artifacts.push_back(emit_classification_csv(report, out_dir));
        stage_status["classify"] = "complete";

        current_stage = "summary";
        {
            auto out = open_out(out_dir, "summary.txt");
            out << "trace: " << (trace_path.empty() ? "synthetic (trace.jsonl)" : trace_path)
                << '\n';
            out << "requests clustered: " << cluster.matrix.rows << ", K=" << cluster.model.K
                << ", D=" << cluster.group_map.D << '\n';
            out << "simulated layer " << config.simulation.layer << " over "
                << config.simulation.batches << " batches of " << config.simulation.batch_size
                << " requests\n";
            out << "normalized inter-node bytes vs linear median:\n";
            for (const auto &s : table.summary)
                out << "  " << s.strategy << ": median " << fmt_double(s.normalized_median, 6)
                    << " (inter-node bytes median " << fmt_double(s.median_inter_node_bytes, 6)
                    << ")\n";
            out << "prefill classification accuracy: mean "
                << fmt_double(report.mean_accuracy, 6) << " +/- "
                << fmt_double(report.stddev_accuracy, 6) << " across "
                << report.layers.size() << " layers\n";
            result.artifacts.push_back("summary.txt");
        }
        stage_status["summary"] = "complete";

        result.ok = true;
        write_manifest();
        result.artifacts.push_back("manifest.json");
        return result;
    } catch (const std::exception &e) {
        result.ok = false;
        result.failed_stage = current_stage;
        result.error = e.what();
        stage_status[current_stage] = "failed";
        if (current_stage != "setup") { // setup failure means the lock is held elsewhere
            try {
                write_manifest();
                result.artifacts.push_back("manifest.json");
            } catch (...) {
                // manifest write failure must not mask the stage error
            }
        }
        return result;
    }
}

} // namespace moeplace
