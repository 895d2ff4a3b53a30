// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moeplace/classifier.hpp"
#include "moeplace/placement.hpp"
#include "moeplace/simulator.hpp"
#include "moeplace/trace.hpp"

namespace moeplace {

struct ClusteringConfig {
    std::uint32_t K = 0; // 0 = auto: number of distinct dataset labels
    std::uint64_t seed = 0;
    std::uint32_t max_iterations = 100;
    double tolerance = 1e-6;
    std::uint32_t restarts = 10; // k-means++ restarts, lowest objective wins
    std::int32_t layer = -1;     // -1 = sum across all MoE layers
    Stage stage = Stage::decode;
};

struct PlacementConfig {
    std::vector<PlacementStrategy> strategies = {PlacementStrategy::linear,
                                                 PlacementStrategy::eplb,
                                                 PlacementStrategy::data_based};
    std::uint32_t R_redundancy = 0;
    std::uint64_t seed = 0;
};

struct SimulationConfig {
    std::uint32_t batches = 100;
    std::uint32_t batch_size = 128;
    std::uint64_t seed = 0;
    std::uint32_t layer = 0; // MoE layer whose decode traffic is simulated
};

struct ClassifierConfig {
    SplitSpec split;
    TrainParams train;
};

/// Everything one pipeline run needs; loaded from a single JSON file.
struct RunConfig {
    ModelConfig model;
    Topology topology;
    CostModelParams cost;
    ClusteringConfig clustering;
    PlacementConfig placement;
    SimulationConfig simulation;
    ClassifierConfig classifier;
    SyntheticTraceSpec synthetic; // used by `synth` and trace-less pipelines
    bool has_synthetic = false;
};

RunConfig load_run_config(const std::string &path);
RunConfig parse_run_config(const std::string &json_text);

/// Standalone topology / cost-model config files (the same schema as the
/// matching RunConfig section, bare or wrapped under its section key).
Topology load_topology_config(const std::string &path);
CostModelParams load_cost_config(const std::string &path);

/// Checks every cross-field invariant and returns one human-readable
/// violation per broken rule (empty means the config is valid). Violations
/// are data, not errors.
std::vector<std::string> validate_config(const RunConfig &config);

} // namespace moeplace
