// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "moeplace/clustering.hpp"
#include "moeplace/trace.hpp"

namespace moeplace {

/// Aggregated per-group expert demand U[d][e]: total tokens the clusters
/// assigned to group d routed to expert e.
struct UsageMatrix {
    std::uint32_t D = 0;
    std::uint32_t E = 0;
    std::vector<double> values; // D x E row-major

    double at(std::uint32_t d, std::uint32_t e) const { return values[std::size_t(d) * E + e]; }
    double &at(std::uint32_t d, std::uint32_t e) { return values[std::size_t(d) * E + e]; }
};

enum class PlacementStrategy { linear, eplb, data_based };

const char *strategy_name(PlacementStrategy s);
PlacementStrategy strategy_from_name(const std::string &name);

/// Expert-to-group placement: D groups of exactly M = (E + R) / D experts,
/// jointly covering all E experts, no expert twice within a group. Group
/// lists keep placement order (most-used first), which the balancing stage
/// relies on when trimming oversized groups from the tail.
struct Placement {
    std::vector<std::vector<std::uint32_t>> groups;
    std::uint32_t E = 0;
    std::uint32_t R_redundancy = 0;
    std::uint32_t M = 0;
    PlacementStrategy strategy = PlacementStrategy::data_based;

    std::uint32_t D() const { return static_cast<std::uint32_t>(groups.size()); }
    /// Throws ValidationError unless full coverage and exact sizes hold.
    void verify() const;
};

/// Cluster layout of one deployment: DP/TP ranks for non-expert layers,
/// EP/TP ranks for experts, and the group-to-node mapping the simulator uses
/// to split intra-node from inter-node traffic.
struct Topology {
    std::uint32_t dp = 1;
    std::uint32_t tp = 1;
    std::uint32_t ep = 1;
    std::uint32_t tp_exp = 1;
    std::uint32_t nodes = 1;
    std::uint32_t gpus_per_node = 1;
    std::vector<std::uint32_t> group_to_node; // per expert group

    std::uint32_t node_of(std::uint32_t group) const { return group_to_node[group]; }
    void validate() const;

    /// ep groups dealt contiguously over `nodes` nodes (ep/nodes per node).
    static Topology contiguous(std::uint32_t dp, std::uint32_t tp, std::uint32_t ep,
                               std::uint32_t tp_exp, std::uint32_t nodes);
};

/// U[d][e] = sum over clusters mapped to group d of the cluster's total
/// routed tokens to expert e. A cluster assigned to several groups
/// contributes its full counts to each of them.
UsageMatrix aggregate_usage(const GroupMap &group_map, const ActivationMatrix &raw_matrix,
                            const ClusterModel &model, std::uint32_t D);

/// Phase 1: place each expert exactly once, most-important first
/// (I_e = max_d U[d][e]), into its highest-usage group with space below
/// ceil(E/D). Ties break toward the lower expert/group index.
std::vector<std::vector<std::uint32_t>> phase1_unique_distribution(const UsageMatrix &usage);

/// Phase 2: grow every group to exactly M slots by appending the
/// highest-usage experts not already in the group.
void phase2_redundant_addition(std::vector<std::vector<std::uint32_t>> &groups,
                               const UsageMatrix &usage, std::uint32_t M);

/// Balancing + verification: trims oversized groups from the tail (never
/// removing the sole copy of an expert), randomly inserts missing experts
/// into undersized groups, then checks coverage and exact sizes.
Placement balance_and_verify(std::vector<std::vector<std::uint32_t>> groups, std::uint32_t E,
                             std::uint32_t M, std::uint64_t seed);

/// Full data-based pipeline: phase 1, phase 2 with M = (E + R)/D, balance.
Placement data_based_placement(const UsageMatrix &usage, std::uint32_t R_redundancy,
                               std::uint64_t seed);

/// Contiguous baseline: group d holds experts [d*E/D, (d+1)*E/D).
Placement linear_placement(std::uint32_t E, std::uint32_t D);

/// Load-balanced baseline: experts sorted by descending historical load,
/// greedily assigned to the least-loaded group with space (capacity E/D).
Placement eplb_placement(std::span<const double> historical_per_expert_load, std::uint32_t E,
                         std::uint32_t D);

/// Recommended groups for a clustered request: map(C_k) of its cluster.
/// `request_ids` is the clustered matrix's id column (ascending by
/// construction). Throws LookupError for unknown request ids.
std::vector<std::uint32_t> route_request(std::uint64_t request_id,
                                         std::span<const std::uint64_t> request_ids,
                                         const ClusterModel &model, const GroupMap &group_map);

/// Placement file: one line per group, `group_id: e1 e2 ... eM`.
void write_placement(const Placement &placement, std::ostream &out);
Placement parse_placement(std::istream &in, PlacementStrategy strategy);

void write_placement_file(const Placement &placement, const std::string &path);
Placement read_placement_file(const std::string &path, PlacementStrategy strategy);

} // namespace moeplace
