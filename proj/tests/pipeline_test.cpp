// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "moeplace/pipeline.hpp"

using namespace moeplace;
namespace fs = std::filesystem;

namespace {

RunConfig small_config() {
    RunConfig config;
    config.model = ModelConfig{"t", 16, 2, 2, false};
    config.topology = Topology::contiguous(2, 1, 2, 1, 2);
    config.cost.hidden_dim = 512;
    config.clustering.seed = 1;
    config.clustering.restarts = 6;
    config.placement.seed = 2;
    config.simulation = SimulationConfig{10, 8, 3, 0};
    config.classifier.split.seed = 4;
    config.classifier.train.epochs = 100;
    config.synthetic = SyntheticTraceSpec{2, 20, 8, 0.9, 8.0, 7};
    config.has_synthetic = true;
    return config;
}

fs::path fresh_dir(const std::string &name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    return dir;
}

std::string slurp(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

} // namespace

TEST_CASE("validate_config flags divisibility and top_k violations") {
    auto config = small_config();
    CHECK(validate_config(config).empty());

    config.placement.R_redundancy = 1; // (16 + 1) % 2 != 0
    auto violations = validate_config(config);
    REQUIRE(!violations.empty());
    bool found = false;
    for (const auto &v : violations)
        found = found || v.find("divisible") != std::string::npos;
    CHECK(found);

    config = small_config();
    config.model.top_k = 20;
    violations = validate_config(config);
    found = false;
    for (const auto &v : violations)
        found = found || v.find("top_k") != std::string::npos;
    CHECK(found);
}

TEST_CASE("run config round-trips through JSON") {
    const char *text = R"({
      "model": {"name": "m", "num_experts_per_layer": 16, "top_k": 2, "num_moe_layers": 2},
      "topology": {"dp": 2, "tp": 1, "ep": 2, "tp_exp": 1, "nodes": 2},
      "cost": {"hidden_dim": 512},
      "clustering": {"K": 2, "seed": 5, "restarts": 3},
      "placement": {"strategies": ["linear"], "R_redundancy": 0, "seed": 6},
      "simulation": {"batches": 4, "batch_size": 8, "seed": 7, "layer": 1},
      "classifier": {"train_fraction": 0.8, "epochs": 50},
      "synthetic": {"num_domains": 2, "requests_per_domain": 10,
                    "preferred_experts_per_domain": 8, "affinity": 1.0,
                    "decode_tokens_mean": 4.0, "seed": 8}
    })";
    auto config = parse_run_config(text);
    CHECK(config.model.num_experts_per_layer == 16);
    CHECK(config.topology.gpus_per_node == 1);
    CHECK(config.topology.group_to_node == std::vector<std::uint32_t>{0, 1});
    CHECK(config.clustering.K == 2);
    CHECK(config.placement.strategies ==
          std::vector<PlacementStrategy>{PlacementStrategy::linear});
    CHECK(config.simulation.layer == 1);
    CHECK(config.has_synthetic);
    CHECK(validate_config(config).empty());
}

TEST_CASE("run_pipeline produces every artifact and a passing summary") {
    auto dir = fresh_dir("moeplace_pipe_smoke");
    auto result = run_pipeline(small_config(), "", dir.string());
    REQUIRE(result.ok);
    for (const char *name :
         {"trace.jsonl", "imbalance.csv", "dataset_correlation_decode.csv",
          "prefill_decode_correlation.csv", "cluster_report.csv", "cluster_model.txt",
          "placement_linear.txt", "placement_eplb.txt", "placement_data_based.txt",
          "simulation.csv", "simulation_summary.csv", "breakdown.csv", "classification.csv",
          "summary.txt", "manifest.json"})
        CHECK(fs::exists(dir / name));

    // planted domains: the data-based strategy must beat the linear median
    std::ifstream summary(dir / "simulation_summary.csv");
    std::string line;
    std::getline(summary, line); // header
    bool checked = false;
    while (std::getline(summary, line)) {
        if (line.rfind("data_based,", 0) == 0) {
            std::istringstream ls(line.substr(line.find(',') + 1));
            std::string field;
            for (int i = 0; i < 4; ++i)
                std::getline(ls, field, ','); // 4th field is normalized_median
            CHECK(std::stod(field) < 1.0);
            checked = true;
        }
    }
    CHECK(checked);
    fs::remove_all(dir);
}

TEST_CASE("run_pipeline without a trace or synthetic section fails in the trace stage") {
    auto dir = fresh_dir("moeplace_pipe_notrace");
    auto config = small_config();
    config.has_synthetic = false;
    auto result = run_pipeline(config, "", dir.string());
    CHECK(!result.ok);
    CHECK(result.failed_stage == "trace");
    fs::remove_all(dir);
}

TEST_CASE("run_pipeline reports missing trace files without writing stage outputs") {
    auto dir = fresh_dir("moeplace_pipe_badpath");
    auto result = run_pipeline(small_config(), "/nonexistent/trace.jsonl", dir.string());
    CHECK(!result.ok);
    CHECK(result.failed_stage == "trace");
    CHECK(!fs::exists(dir / "simulation.csv"));
    fs::remove_all(dir);
}

TEST_CASE("a strategies filter restricts the simulation rows") {
    auto dir = fresh_dir("moeplace_pipe_filter");
    auto config = small_config();
    config.placement.strategies = {PlacementStrategy::linear};
    auto result = run_pipeline(config, "", dir.string());
    REQUIRE(result.ok);
    std::ifstream in(dir / "simulation.csv");
    std::string line;
    std::getline(in, line); // header
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        CHECK(line.find("linear") != std::string::npos);
        CHECK(line.find("eplb") == std::string::npos);
        ++rows;
    }
    CHECK(rows == 10); // one per batch
    fs::remove_all(dir);
}

TEST_CASE("pipeline runs are byte-identical for a fixed config") {
    auto dir_a = fresh_dir("moeplace_pipe_det_a");
    auto dir_b = fresh_dir("moeplace_pipe_det_b");
    auto config = small_config();
    REQUIRE(run_pipeline(config, "", dir_a.string()).ok);
    REQUIRE(run_pipeline(config, "", dir_b.string()).ok);
    for (const auto &entry : fs::directory_iterator(dir_a)) {
        auto name = entry.path().filename();
        CHECK(slurp(entry.path()) == slurp(dir_b / name));
    }
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("the output lock blocks concurrent pipeline runs") {
    auto dir = fresh_dir("moeplace_pipe_lock");
    fs::create_directories(dir);
    std::ofstream(dir / ".moeplace.lock") << "";
    auto result = run_pipeline(small_config(), "", dir.string());
    CHECK(!result.ok);
    CHECK(result.failed_stage == "setup");
    fs::remove_all(dir);
}

TEST_CASE("clustering honors the layer and stage restrictions") {
    auto config = small_config();
    auto records = generate_synthetic_trace(config.synthetic, config.model);

    ClusteringConfig restricted = config.clustering;
    restricted.layer = 1;
    restricted.stage = Stage::prefill;
    auto stage = run_cluster_stage(records, config.model, restricted, 2);
    CHECK(stage.matrix.rows == 40); // every request has a prefill record at layer 1

    auto expected = build_activation_matrix(records, config.model.num_experts_per_layer, 1,
                                            Stage::prefill);
    CHECK(stage.matrix.values == expected.values);

    restricted.layer = 7; // beyond num_moe_layers
    CHECK_THROWS_AS(run_cluster_stage(records, config.model, restricted, 2),
                    EmptySelectionError);
}

TEST_CASE("data-based placements honor a redundancy budget end to end") {
    auto config = small_config();
    config.placement.R_redundancy = 16; // E=16, D=2 -> M=16: full replication
    auto records = generate_synthetic_trace(config.synthetic, config.model);
    auto stage = run_cluster_stage(records, config.model, config.clustering, 2);
    for (const auto &entry : build_placements(stage, config.placement)) {
        if (entry.label != "data_based")
            continue;
        CHECK(entry.placement.M == 16);
        for (const auto &group : entry.placement.groups)
            CHECK(group.size() == 16);
    }
}

TEST_CASE("standalone topology and cost configs load bare or wrapped") {
    auto dir = fresh_dir("moeplace_cfg_files");
    fs::create_directories(dir);
    std::ofstream(dir / "topo.json")
        << R"({"dp": 2, "tp": 1, "ep": 2, "tp_exp": 1, "nodes": 2})";
    std::ofstream(dir / "wrapped.json")
        << R"({"cost": {"hidden_dim": 2048, "bytes_per_element": 2}})";
    auto topo = load_topology_config((dir / "topo.json").string());
    CHECK(topo.ep == 2);
    CHECK(topo.group_to_node == std::vector<std::uint32_t>{0, 1});
    auto cost = load_cost_config((dir / "wrapped.json").string());
    CHECK(cost.hidden_dim == 2048);
    CHECK(cost.bytes_per_element == 2);
    CHECK_THROWS_AS(load_cost_config((dir / "missing.json").string()), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("cluster reports round-trip the routing table") {
    auto config = small_config();
    auto records = generate_synthetic_trace(config.synthetic, config.model);
    auto stage = run_cluster_stage(records, config.model, config.clustering, 2);

    std::stringstream io;
    write_cluster_report(stage, io);
    auto routes = parse_cluster_report(io);
    REQUIRE(routes.size() == stage.matrix.rows);
    for (std::size_t r = 0; r < stage.matrix.rows; ++r) {
        auto expected = stage.group_map.assignment[stage.model.labels[r]];
        CHECK(routes.at(stage.matrix.request_ids[r]) == expected);
    }
}

TEST_CASE("standalone stages chain through files like the pipeline") {
    auto dir = fresh_dir("moeplace_stage_chain");
    fs::create_directories(dir);
    auto config = small_config();
    auto records = generate_synthetic_trace(config.synthetic, config.model);

    auto stage = run_cluster_stage(records, config.model, config.clustering, 2);
    emit_cluster_artifacts(stage, dir.string());

    auto strategies = build_placements(stage, config.placement);
    REQUIRE(strategies.size() == 3);
    for (const auto &entry : strategies)
        write_placement_file(entry.placement,
                             (dir / ("placement_" + entry.label + ".txt")).string());

    // reload placements + report the way the simulate subcommand does
    std::vector<StrategyEntry> reloaded;
    for (const auto &entry : strategies) {
        StrategyEntry r;
        r.label = entry.label;
        r.placement = read_placement_file((dir / ("placement_" + entry.label + ".txt")).string(),
                                          entry.placement.strategy);
        r.cluster_routed = entry.cluster_routed;
        reloaded.push_back(std::move(r));
        CHECK(reloaded.back().placement.groups == entry.placement.groups);
    }

    auto decode = build_activation_matrix(records, config.model.num_experts_per_layer, 0,
                                          Stage::decode);
    auto routes = routing_for_matrix(decode, stage.matrix.request_ids, stage.model,
                                     stage.group_map);
    auto table = compare_strategies(decode, reloaded, routes, config.topology, config.cost, 5,
                                    8, 1);
    CHECK(table.rows.size() == 15);
    fs::remove_all(dir);
}
