// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moeplace/clustering.hpp"
#include "moeplace/placement.hpp"
#include "moeplace/trace.hpp"

namespace moeplace {

/// Analytic cost constants behind the dispatch / expert compute / combine
/// breakdown. Bandwidths are bytes/second; expert_time_per_token is seconds
/// per routed token on one EP rank.
struct CostModelParams {
    std::uint32_t hidden_dim = 7168;
    std::uint32_t bytes_per_element = 1;
    double inter_node_bandwidth = 50e9;
    double intra_node_bandwidth = 300e9;
    double expert_time_per_token = 1e-7;
    double fixed_layer_overhead = 50e-6; // gate + non-expert residue

    void validate() const;
};

/// One decode micro-batch: each request sits on a source group and carries
/// its per-expert token counts for the simulated layer.
struct BatchRequest {
    std::uint64_t request_id = 0;
    std::uint32_t source_group = 0;
    std::vector<std::pair<std::uint32_t, double>> expert_counts; // (expert, tokens)
};

struct BatchAssignment {
    std::vector<BatchRequest> requests;
};

/// Volumes and component times for one simulated MoE layer pass.
struct LayerSim {
    double inter_node_bytes = 0.0;
    double intra_node_bytes = 0.0;
    double dispatch_time = 0.0;
    double expert_compute_time = 0.0;
    double combine_time = 0.0;
    double layer_time = 0.0;
    std::vector<double> per_rank_payload; // bytes landing on each group
};

/// Padded all-to-all: every rank is padded to the largest payload, so the
/// collective finishes in max(payload) / bandwidth. The inter-node link is
/// the effective bandwidth whenever the EP groups span more than one node
/// (padding crosses nodes even when useful data does not); tp_exp shards
/// each rank's payload.
double padded_all_to_all_time(std::span<const double> per_rank_payload_bytes,
                              const Topology &topology, const CostModelParams &cost);

/// Routes every (request, expert, count) of the batch to the group holding
/// the expert (redundant copies resolve to the same-node copy first, then
/// the lowest group id), splits the moved bytes by node locality, and prices
/// dispatch, straggler-bound expert compute, and combine.
LayerSim simulate_layer(const BatchAssignment &batch, const Placement &placement,
                        const Topology &topology, const CostModelParams &cost);

/// One placement entered into a comparison. Data-based routing follows the
/// request's recommended groups (Eq.-style cluster map); baseline routing is
/// round-robin over the D groups.
struct StrategyEntry {
    std::string label;
    Placement placement;
    bool cluster_routed = false;
};

struct ComparisonRow {
    std::uint32_t batch = 0;
    std::string strategy;
    LayerSim sim;
    double normalized = 0.0; // inter-node bytes / linear median
};

struct StrategySummary {
    std::string strategy;
    double median_inter_node_bytes = 0.0;
    double q25_inter_node_bytes = 0.0;
    double q75_inter_node_bytes = 0.0;
    double normalized_median = 0.0;
    double median_dispatch_time = 0.0;
    double median_expert_compute_time = 0.0;
    double median_combine_time = 0.0;
    double median_layer_time = 0.0;
};

struct ComparisonTable {
    std::vector<ComparisonRow> rows; // batch-major, strategies in entry order
    std::vector<StrategySummary> summary;
    double linear_median_bytes = 0.0;
};

/// Per-request routing table for cluster-routed strategies: recommended
/// group set per decode-matrix row, aligned with `decode_matrix` rows.
std::vector<std::vector<std::uint32_t>> routing_table(const ClusterModel &model,
                                                      const GroupMap &group_map);

/// Samples `num_batches` batches of `batch_size` requests (with replacement,
/// deterministic in `seed`) from the rows of `decode_matrix` and simulates
/// every strategy on identical samples. Normalization divides each batch's
/// inter-node bytes by the median of the strategy labelled "linear"; NaN
/// when no such strategy is present.
ComparisonTable compare_strategies(const ActivationMatrix &decode_matrix,
                                   const std::vector<StrategyEntry> &strategies,
                                   const std::vector<std::vector<std::uint32_t>> &route_groups,
                                   const Topology &topology, const CostModelParams &cost,
                                   std::uint32_t num_batches, std::uint32_t batch_size,
                                   std::uint64_t seed);

/// Convenience wrapper matching the planning pipeline: builds the linear,
/// EPLB (historical loads = decode column sums) and data-based placements
/// from the trace-derived inputs, then compares them.
ComparisonTable compare_default_strategies(const ActivationMatrix &decode_matrix,
                                           const ClusterModel &model, const GroupMap &group_map,
                                           const Topology &topology, const CostModelParams &cost,
                                           std::uint32_t num_batches, std::uint32_t batch_size,
                                           std::uint64_t seed, std::uint32_t R_redundancy = 0);

struct BreakdownRow {
    std::string strategy;
    double dispatch_fraction = 0.0;
    double compute_fraction = 0.0;
    double combine_fraction = 0.0;
    double overhead_fraction = 0.0;
    double median_layer_time = 0.0;
};

/// Median component times per strategy, expressed as fractions of their sum
/// (the fractions total 1 by construction).
std::vector<BreakdownRow> latency_breakdown_report(const ComparisonTable &table,
                                                   const CostModelParams &cost);

} // namespace moeplace
