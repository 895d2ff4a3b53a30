// SPDX-License-Identifier: Apache-2.0
#include "moeplace/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "moeplace/parallel.hpp"
#include "moeplace/stats.hpp"

namespace moeplace {

void CostModelParams::validate() const {
    if (hidden_dim == 0 || bytes_per_element == 0)
        throw ConfigError("cost model: hidden_dim and bytes_per_element must be >= 1");
    if (inter_node_bandwidth <= 0.0 || intra_node_bandwidth <= 0.0)
        throw ConfigError("cost model: bandwidths must be positive");
    if (intra_node_bandwidth < inter_node_bandwidth)
        throw ConfigError("cost model: intra_node_bandwidth must be >= inter_node_bandwidth");
    if (expert_time_per_token <= 0.0)
        throw ConfigError("cost model: expert_time_per_token must be positive");
    if (fixed_layer_overhead < 0.0)
        throw ConfigError("cost model: fixed_layer_overhead must be >= 0");
}

double padded_all_to_all_time(std::span<const double> per_rank_payload_bytes,
                              const Topology &topology, const CostModelParams &cost) {
    if (per_rank_payload_bytes.empty())
        return 0.0;
    double max_payload = *std::max_element(per_rank_payload_bytes.begin(),
                                           per_rank_payload_bytes.end());
    bool spans_nodes = false;
    for (std::size_t g = 1; g < topology.group_to_node.size(); ++g)
        if (topology.group_to_node[g] != topology.group_to_node[0]) {
            spans_nodes = true;
            break;
        }
    double bandwidth = spans_nodes ? cost.inter_node_bandwidth : cost.intra_node_bandwidth;
    return max_payload / static_cast<double>(topology.tp_exp) / bandwidth;
}

LayerSim simulate_layer(const BatchAssignment &batch, const Placement &placement,
                        const Topology &topology, const CostModelParams &cost) {
    cost.validate();
    topology.validate();
    const std::uint32_t D = placement.D();
    if (topology.ep != D)
        throw ConfigError("simulate_layer: topology.ep (" + std::to_string(topology.ep) +
                          ") != placement group count (" + std::to_string(D) + ")");

    std::vector<std::vector<std::uint32_t>> holders(placement.E);
    for (std::uint32_t d = 0; d < D; ++d)
        for (std::uint32_t e : placement.groups[d])
            holders[e].push_back(d); // group ids ascend per expert

    const double bytes_per_token =
        static_cast<double>(cost.hidden_dim) * static_cast<double>(cost.bytes_per_element);

    LayerSim sim;
    sim.per_rank_payload.assign(D, 0.0);
    std::vector<double> tokens_per_group(D, 0.0);

    for (const auto &request : batch.requests) {
        if (request.source_group >= D)
            throw ValidationError("simulate_layer: source group out of range");
        const std::uint32_t src_node = topology.node_of(request.source_group);
        for (const auto &[expert, count] : request.expert_counts) {
            if (expert >= placement.E || holders[expert].empty())
                throw ValidationError("simulate_layer: expert " + std::to_string(expert) +
                                      " is not covered by the placement");
            // redundancy resolves to the locality-best copy: same node first,
            // then the lowest group id
            std::uint32_t dest = holders[expert][0];
            for (std::uint32_t d : holders[expert]) {
                if (topology.node_of(d) == src_node) {
                    dest = d;
                    break;
                }
            }
            double bytes = count * bytes_per_token;
            if (topology.node_of(dest) == src_node)
                sim.intra_node_bytes += bytes;
            else
                sim.inter_node_bytes += bytes;
            sim.per_rank_payload[dest] += bytes;
            tokens_per_group[dest] += count;
        }
    }

    sim.dispatch_time = padded_all_to_all_time(sim.per_rank_payload, topology, cost);
    sim.combine_time = sim.dispatch_time; // results return along the same routes
    double straggler_tokens =
        *std::max_element(tokens_per_group.begin(), tokens_per_group.end());
    sim.expert_compute_time = cost.expert_time_per_token * straggler_tokens;
    sim.layer_time = sim.dispatch_time + sim.expert_compute_time + sim.combine_time +
                     cost.fixed_layer_overhead;
    return sim;
}

std::vector<std::vector<std::uint32_t>> routing_table(const ClusterModel &model,
                                                      const GroupMap &group_map) {
    if (group_map.K != model.K)
        throw ValidationError("routing_table: group map K does not match model K");
    std::vector<std::vector<std::uint32_t>> table(model.labels.size());
    for (std::size_t r = 0; r < model.labels.size(); ++r)
        table[r] = group_map.assignment[model.labels[r]];
    return table;
}

namespace {

// Distinct stream per (seed, batch, purpose) so batches can run in parallel
// and routing draws never perturb sampling draws.
std::mt19937_64 batch_rng(std::uint64_t seed, std::uint64_t batch, std::uint64_t purpose) {
    std::seed_seq seq{seed, batch, purpose};
    return std::mt19937_64(seq);
}

} // namespace

ComparisonTable compare_strategies(const ActivationMatrix &decode_matrix,
                                   const std::vector<StrategyEntry> &strategies,
                                   const std::vector<std::vector<std::uint32_t>> &route_groups,
                                   const Topology &topology, const CostModelParams &cost,
                                   std::uint32_t num_batches, std::uint32_t batch_size,
                                   std::uint64_t seed) {
    if (decode_matrix.rows == 0)
        throw ValidationError("compare_strategies: empty decode matrix");
    if (strategies.empty())
        throw ValidationError("compare_strategies: no strategies");
    if (num_batches == 0 || batch_size == 0)
        throw ConfigError("compare_strategies: batches and batch size must be >= 1");
    const std::uint32_t D = strategies[0].placement.D();
    for (const auto &entry : strategies) {
        if (entry.placement.D() != D)
            throw ValidationError("compare_strategies: strategies disagree on group count");
        if (entry.cluster_routed && route_groups.size() != decode_matrix.rows)
            throw ValidationError("compare_strategies: routing table does not cover the matrix");
    }

    // Sparse per-row views shared by all batches.
    std::vector<std::vector<std::pair<std::uint32_t, double>>> row_experts(decode_matrix.rows);
    for (std::size_t r = 0; r < decode_matrix.rows; ++r) {
        auto row = decode_matrix.row(r);
        for (std::size_t e = 0; e < decode_matrix.cols; ++e)
            if (row[e] > 0.0)
                row_experts[r].emplace_back(static_cast<std::uint32_t>(e), row[e]);
    }

    ComparisonTable table;
    table.rows.resize(static_cast<std::size_t>(num_batches) * strategies.size());

    parallel_for(num_batches, [&](std::size_t b) {
        auto sample_rng = batch_rng(seed, b, 1);
        std::uniform_int_distribution<std::size_t> pick_row(0, decode_matrix.rows - 1);
        std::vector<std::size_t> sample(batch_size);
        for (auto &row : sample)
            row = pick_row(sample_rng);

        for (std::size_t s = 0; s < strategies.size(); ++s) {
            const auto &entry = strategies[s];
            BatchAssignment batch;
            batch.requests.reserve(batch_size);
            auto route_rng = batch_rng(seed, b, 2);
            for (std::uint32_t i = 0; i < batch_size; ++i) {
                std::size_t row = sample[i];
                BatchRequest request;
                request.request_id = decode_matrix.request_ids[row];
                request.expert_counts = row_experts[row];
                if (entry.cluster_routed) {
                    const auto &groups = route_groups[row];
                    if (groups.size() == 1)
                        request.source_group = groups[0];
                    else
                        request.source_group = groups[std::uniform_int_distribution<std::size_t>(
                            0, groups.size() - 1)(route_rng)];
                } else {
                    request.source_group = i % D; // baselines have no grouping notion
                }
                batch.requests.push_back(std::move(request));
            }
            ComparisonRow &out = table.rows[b * strategies.size() + s];
            out.batch = static_cast<std::uint32_t>(b);
            out.strategy = entry.label;
            out.sim = simulate_layer(batch, entry.placement, topology, cost);
        }
    });

    // Normalize against the linear strategy's median inter-node bytes.
    std::vector<double> linear_bytes;
    for (const auto &row : table.rows)
        if (row.strategy == "linear")
            linear_bytes.push_back(row.sim.inter_node_bytes);
    table.linear_median_bytes =
        linear_bytes.empty() ? std::numeric_limits<double>::quiet_NaN() : median(linear_bytes);
    for (auto &row : table.rows) {
        if (table.linear_median_bytes > 0.0)
            row.normalized = row.sim.inter_node_bytes / table.linear_median_bytes;
        else if (table.linear_median_bytes == 0.0)
            row.normalized = row.sim.inter_node_bytes == 0.0
                                 ? 1.0
                                 : std::numeric_limits<double>::infinity();
        else
            row.normalized = std::numeric_limits<double>::quiet_NaN();
    }

    for (const auto &entry : strategies) {
        std::vector<double> bytes, normalized, dispatch, compute, combine, layer;
        for (const auto &row : table.rows) {
            if (row.strategy != entry.label)
                continue;
            bytes.push_back(row.sim.inter_node_bytes);
            normalized.push_back(row.normalized);
            dispatch.push_back(row.sim.dispatch_time);
            compute.push_back(row.sim.expert_compute_time);
            combine.push_back(row.sim.combine_time);
            layer.push_back(row.sim.layer_time);
        }
        StrategySummary summary;
        summary.strategy = entry.label;
        summary.median_inter_node_bytes = median(bytes);
        summary.q25_inter_node_bytes = quantile(bytes, 0.25);
        summary.q75_inter_node_bytes = quantile(bytes, 0.75);
        // median(bytes) / linear_median rather than median(bytes / m): the two
        // agree up to rounding, and this form makes linear's own value exactly 1
        if (table.linear_median_bytes > 0.0)
            summary.normalized_median = summary.median_inter_node_bytes /
                                        table.linear_median_bytes;
        else if (table.linear_median_bytes == 0.0)
            summary.normalized_median = summary.median_inter_node_bytes == 0.0
                                            ? 1.0
                                            : std::numeric_limits<double>::infinity();
        else
            summary.normalized_median = median(normalized);
        summary.median_dispatch_time = median(dispatch);
        summary.median_expert_compute_time = median(compute);
        summary.median_combine_time = median(combine);
        summary.median_layer_time = median(layer);
        table.summary.push_back(std::move(summary));
    }
    return table;
}

ComparisonTable compare_default_strategies(const ActivationMatrix &decode_matrix,
                                           const ClusterModel &model, const GroupMap &group_map,
                                           const Topology &topology, const CostModelParams &cost,
                                           std::uint32_t num_batches, std::uint32_t batch_size,
                                           std::uint64_t seed, std::uint32_t R_redundancy) {
    const std::uint32_t E = static_cast<std::uint32_t>(decode_matrix.cols);
    const std::uint32_t D = group_map.D;

    std::vector<double> historical_load(E, 0.0);
    for (std::size_t r = 0; r < decode_matrix.rows; ++r) {
        auto row = decode_matrix.row(r);
        for (std::size_t e = 0; e < E; ++e)
            historical_load[e] += row[e];
    }

    UsageMatrix usage = aggregate_usage(group_map, decode_matrix, model, D);
    std::vector<StrategyEntry> strategies;
    strategies.push_back({"linear", linear_placement(E, D), false});
    strategies.push_back({"eplb", eplb_placement(historical_load, E, D), false});
    strategies.push_back({"data_based", data_based_placement(usage, R_redundancy, seed), true});

    return compare_strategies(decode_matrix, strategies, routing_table(model, group_map),
                              topology, cost, num_batches, batch_size, seed);
}

std::vector<BreakdownRow> latency_breakdown_report(const ComparisonTable &table,
                                                   const CostModelParams &cost) {
    std::vector<BreakdownRow> report;
    for (const auto &summary : table.summary) {
        BreakdownRow row;
        row.strategy = summary.strategy;
        double total = summary.median_dispatch_time + summary.median_expert_compute_time +
                       summary.median_combine_time + cost.fixed_layer_overhead;
        if (total > 0.0) {
            row.dispatch_fraction = summary.median_dispatch_time / total;
            row.compute_fraction = summary.median_expert_compute_time / total;
            row.combine_fraction = summary.median_combine_time / total;
            row.overhead_fraction = cost.fixed_layer_overhead / total;
        }
        row.median_layer_time = summary.median_layer_time;
        report.push_back(std::move(row));
    }
    return report;
}

} // namespace moeplace
