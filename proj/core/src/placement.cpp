// SPDX-License-Identifier: Apache-2.0
#include "moeplace/placement.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace moeplace {

const char *strategy_name(PlacementStrategy s) {
    switch (s) {
    case PlacementStrategy::linear:
        return "linear";
    case PlacementStrategy::eplb:
        return "eplb";
    case PlacementStrategy::data_based:
        return "data_based";
    }
    return "unknown";
}

PlacementStrategy strategy_from_name(const std::string &name) {
    if (name == "linear")
        return PlacementStrategy::linear;
    if (name == "eplb")
        return PlacementStrategy::eplb;
    if (name == "data_based")
        return PlacementStrategy::data_based;
    throw LookupError("unknown placement strategy '" + name + "'");
}

void Placement::verify() const {
    std::vector<bool> covered(E, false);
    for (std::uint32_t d = 0; d < D(); ++d) {
        const auto &group = groups[d];
        if (group.size() != M)
            throw ValidationError("placement: group " + std::to_string(d) + " has " +
                                  std::to_string(group.size()) + " experts, expected M=" +
                                  std::to_string(M));
        std::set<std::uint32_t> unique(group.begin(), group.end());
        if (unique.size() != group.size())
            throw ValidationError("placement: duplicate expert within group " + std::to_string(d));
        for (std::uint32_t e : group) {
            if (e >= E)
                throw ValidationError("placement: expert id " + std::to_string(e) + " >= E");
            covered[e] = true;
        }
    }
    for (std::uint32_t e = 0; e < E; ++e)
        if (!covered[e])
            throw ValidationError("placement: expert " + std::to_string(e) +
                                  " is not placed in any group");
}

void Topology::validate() const {
    if (dp < 1 || tp < 1 || ep < 1 || tp_exp < 1 || nodes < 1 || gpus_per_node < 1)
        throw ConfigError("topology: all rank counts must be >= 1");
    if (ep * tp_exp != dp * tp)
        throw ConfigError("topology: ep*tp_exp (" + std::to_string(ep * tp_exp) +
                          ") != dp*tp (" + std::to_string(dp * tp) + ")");
    if (gpus_per_node * nodes != dp * tp)
        throw ConfigError("topology: gpus_per_node*nodes (" +
                          std::to_string(gpus_per_node * nodes) + ") != dp*tp (" +
                          std::to_string(dp * tp) + ")");
    if (group_to_node.size() != ep)
        throw ConfigError("topology: group_to_node must list one node per EP group");
    for (std::uint32_t n : group_to_node)
        if (n >= nodes)
            throw ConfigError("topology: node id out of range in group_to_node");
}

Topology Topology::contiguous(std::uint32_t dp, std::uint32_t tp, std::uint32_t ep,
                              std::uint32_t tp_exp, std::uint32_t nodes) {
    Topology t;
    t.dp = dp;
    t.tp = tp;
    t.ep = ep;
    t.tp_exp = tp_exp;
    t.nodes = nodes;
    if (nodes == 0 || dp * tp % nodes != 0)
        throw ConfigError("topology: nodes must divide dp*tp");
    t.gpus_per_node = dp * tp / nodes;
    if (ep % nodes != 0)
        throw ConfigError("topology: nodes must divide ep for contiguous group layout");
    std::uint32_t groups_per_node = ep / nodes;
    t.group_to_node.resize(ep);
    for (std::uint32_t g = 0; g < ep; ++g)
        t.group_to_node[g] = g / groups_per_node;
    t.validate();
    return t;
}

UsageMatrix aggregate_usage(const GroupMap &group_map, const ActivationMatrix &raw_matrix,
                            const ClusterModel &model, std::uint32_t D) {
    if (group_map.K != model.K)
        throw ValidationError("aggregate_usage: group map K does not match model K");
    if (group_map.D != D)
        throw ValidationError("aggregate_usage: group map D does not match D");
    if (raw_matrix.rows != model.labels.size())
        throw ValidationError("aggregate_usage: matrix rows do not match labels");

    // Per-cluster expert totals, then replicated into every assigned group.
    const std::size_t E = raw_matrix.cols;
    std::vector<double> cluster_totals(static_cast<std::size_t>(model.K) * E, 0.0);
    for (std::size_t r = 0; r < raw_matrix.rows; ++r) {
        double *acc = cluster_totals.data() + static_cast<std::size_t>(model.labels[r]) * E;
        auto row = raw_matrix.row(r);
        for (std::size_t e = 0; e < E; ++e)
            acc[e] += row[e];
    }

    UsageMatrix usage;
    usage.D = D;
    usage.E = static_cast<std::uint32_t>(E);
    usage.values.assign(static_cast<std::size_t>(D) * E, 0.0);
    for (std::uint32_t k = 0; k < model.K; ++k)
        for (std::uint32_t d : group_map.assignment[k])
            for (std::size_t e = 0; e < E; ++e)
                usage.at(d, static_cast<std::uint32_t>(e)) +=
                    cluster_totals[static_cast<std::size_t>(k) * E + e];
    return usage;
}

std::vector<std::vector<std::uint32_t>> phase1_unique_distribution(const UsageMatrix &usage) {
    const std::uint32_t D = usage.D;
    const std::uint32_t E = usage.E;
    if (D < 1 || E < D)
        throw InfeasibleError("phase1: requires E >= D >= 1");
    const std::uint32_t m_max = (E + D - 1) / D;

    std::vector<std::uint32_t> experts(E);
    std::iota(experts.begin(), experts.end(), 0);
    std::vector<double> importance(E);
    for (std::uint32_t e = 0; e < E; ++e) {
        double best = 0.0;
        for (std::uint32_t d = 0; d < D; ++d)
            best = std::max(best, usage.at(d, e));
        importance[e] = best;
    }
    std::stable_sort(experts.begin(), experts.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return importance[a] > importance[b]; });

    std::vector<std::vector<std::uint32_t>> groups(D);
    std::vector<std::uint32_t> group_order(D);
    for (std::uint32_t e : experts) {
        std::iota(group_order.begin(), group_order.end(), 0);
        std::stable_sort(group_order.begin(), group_order.end(), [&](std::uint32_t a, std::uint32_t b) {
            return usage.at(a, e) > usage.at(b, e);
        });
        for (std::uint32_t d : group_order) {
            if (groups[d].size() < m_max) {
                groups[d].push_back(e);
                break;
            }
        }
    }
    return groups;
}

void phase2_redundant_addition(std::vector<std::vector<std::uint32_t>> &groups,
                               const UsageMatrix &usage, std::uint32_t M) {
    const std::uint32_t E = usage.E;
    for (std::uint32_t d = 0; d < groups.size(); ++d) {
        auto &group = groups[d];
        if (group.size() > M)
            throw InfeasibleError("phase2: group " + std::to_string(d) + " already above M");
        std::size_t needed = M - group.size();
        if (needed == 0)
            continue;
        std::set<std::uint32_t> present(group.begin(), group.end());
        std::vector<std::uint32_t> candidates;
        candidates.reserve(E - present.size());
        for (std::uint32_t e = 0; e < E; ++e)
            if (!present.count(e))
                candidates.push_back(e);
        if (needed > candidates.size())
            throw InfeasibleError("phase2: group " + std::to_string(d) + " needs " +
                                  std::to_string(needed) + " experts but only " +
                                  std::to_string(candidates.size()) + " candidates (M > E)");
        std::stable_sort(candidates.begin(), candidates.end(),
                         [&](std::uint32_t a, std::uint32_t b) {
                             return usage.at(d, a) > usage.at(d, b);
                         });
        group.insert(group.end(), candidates.begin(), candidates.begin() + needed);
    }
}

Placement balance_and_verify(std::vector<std::vector<std::uint32_t>> groups, std::uint32_t E,
                             std::uint32_t M, std::uint64_t seed) {
    const std::uint32_t D = static_cast<std::uint32_t>(groups.size());
    if (D == 0)
        throw InfeasibleError("balance_and_verify: no groups");
    std::mt19937_64 rng(seed);

    std::vector<std::uint32_t> copies(E, 0);
    for (const auto &group : groups)
        for (std::uint32_t e : group) {
            if (e >= E)
                throw ValidationError("balance_and_verify: expert id out of range");
            ++copies[e];
        }

    // Oversized groups: drop duplicated experts from the end of the list
    // (lowest-usage end, given placement order), keeping sole copies.
    for (auto &group : groups) {
        // within-group duplicates go first, scanning from the tail
        std::set<std::uint32_t> seen;
        for (std::size_t i = 0; i < group.size();) {
            if (!seen.insert(group[i]).second) {
                --copies[group[i]];
                group.erase(group.begin() + static_cast<std::ptrdiff_t>(i));
            } else {
                ++i;
            }
        }
        while (group.size() > M) {
            bool removed = false;
            for (std::size_t i = group.size(); i-- > 0;) {
                if (copies[group[i]] > 1) {
                    --copies[group[i]];
                    group.erase(group.begin() + static_cast<std::ptrdiff_t>(i));
                    removed = true;
                    break;
                }
            }
            if (!removed)
                throw ValidationError(
                    "balance_and_verify: oversized group holds only sole-copy experts");
        }
    }

    // Globally missing experts land in a random undersized group.
    std::vector<std::uint32_t> missing;
    for (std::uint32_t e = 0; e < E; ++e)
        if (copies[e] == 0)
            missing.push_back(e);
    for (std::uint32_t e : missing) {
        std::vector<std::uint32_t> undersized;
        for (std::uint32_t d = 0; d < D; ++d)
            if (groups[d].size() < M)
                undersized.push_back(d);
        if (undersized.empty())
            throw ValidationError("balance_and_verify: expert " + std::to_string(e) +
                                  " missing but no group has a free slot");
        std::uint32_t d = undersized[std::uniform_int_distribution<std::size_t>(
            0, undersized.size() - 1)(rng)];
        groups[d].push_back(e);
        ++copies[e];
    }

    // Remaining undersized groups take random experts they do not yet hold.
    for (std::uint32_t d = 0; d < D; ++d) {
        auto &group = groups[d];
        while (group.size() < M) {
            std::set<std::uint32_t> present(group.begin(), group.end());
            std::vector<std::uint32_t> candidates;
            for (std::uint32_t e = 0; e < E; ++e)
                if (!present.count(e))
                    candidates.push_back(e);
            if (candidates.empty())
                throw InfeasibleError("balance_and_verify: M > E, cannot fill group " +
                                      std::to_string(d));
            std::uint32_t e = candidates[std::uniform_int_distribution<std::size_t>(
                0, candidates.size() - 1)(rng)];
            group.push_back(e);
            ++copies[e];
        }
    }

    Placement placement;
    placement.groups = std::move(groups);
    placement.E = E;
    placement.M = M;
    placement.R_redundancy = M * D - E;
    placement.strategy = PlacementStrategy::data_based;
    placement.verify();
    return placement;
}

Placement data_based_placement(const UsageMatrix &usage, std::uint32_t R_redundancy,
                               std::uint64_t seed) {
    const std::uint32_t E = usage.E;
    const std::uint32_t D = usage.D;
    if ((E + R_redundancy) % D != 0)
        throw ConfigError("data_based_placement: (E + R) = " + std::to_string(E + R_redundancy) +
                          " not divisible by D = " + std::to_string(D));
    const std::uint32_t M = (E + R_redundancy) / D;
    auto groups = phase1_unique_distribution(usage);
    phase2_redundant_addition(groups, usage, M);
    return balance_and_verify(std::move(groups), E, M, seed);
}

Placement linear_placement(std::uint32_t E, std::uint32_t D) {
    if (D == 0 || E % D != 0)
        throw ConfigError("linear_placement: D must divide E (E=" + std::to_string(E) +
                          ", D=" + std::to_string(D) + ")");
    const std::uint32_t per_group = E / D;
    Placement placement;
    placement.E = E;
    placement.M = per_group;
    placement.R_redundancy = 0;
    placement.strategy = PlacementStrategy::linear;
    placement.groups.resize(D);
    for (std::uint32_t d = 0; d < D; ++d) {
        placement.groups[d].resize(per_group);
        std::iota(placement.groups[d].begin(), placement.groups[d].end(), d * per_group);
    }
    placement.verify();
    return placement;
}

Placement eplb_placement(std::span<const double> historical_per_expert_load, std::uint32_t E,
                         std::uint32_t D) {
    if (historical_per_expert_load.size() != E)
        throw ValidationError("eplb_placement: load vector length != E");
    if (D == 0 || E % D != 0)
        throw ConfigError("eplb_placement: D must divide E (E=" + std::to_string(E) +
                          ", D=" + std::to_string(D) + ")");
    const std::uint32_t per_group = E / D;

    std::vector<std::uint32_t> order(E);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        return historical_per_expert_load[a] > historical_per_expert_load[b];
    });

    Placement placement;
    placement.E = E;
    placement.M = per_group;
    placement.R_redundancy = 0;
    placement.strategy = PlacementStrategy::eplb;
    placement.groups.resize(D);
    std::vector<double> group_load(D, 0.0);
    for (std::uint32_t e : order) {
        std::uint32_t best = D;
        for (std::uint32_t d = 0; d < D; ++d) {
            if (placement.groups[d].size() >= per_group)
                continue;
            if (best == D || group_load[d] < group_load[best])
                best = d;
        }
        placement.groups[best].push_back(e);
        group_load[best] += historical_per_expert_load[e];
    }
    placement.verify();
    return placement;
}

std::vector<std::uint32_t> route_request(std::uint64_t request_id,
                                         std::span<const std::uint64_t> request_ids,
                                         const ClusterModel &model, const GroupMap &group_map) {
    if (request_ids.size() != model.labels.size())
        throw ValidationError("route_request: request id list does not match labels");
    auto it = std::lower_bound(request_ids.begin(), request_ids.end(), request_id);
    if (it == request_ids.end() || *it != request_id)
        throw LookupError("route_request: unknown request id " + std::to_string(request_id));
    std::uint32_t cluster = model.labels[static_cast<std::size_t>(it - request_ids.begin())];
    return group_map.assignment[cluster];
}

void write_placement(const Placement &placement, std::ostream &out) {
    for (std::uint32_t d = 0; d < placement.D(); ++d) {
        out << d << ':';
        for (std::uint32_t e : placement.groups[d])
            out << ' ' << e;
        out << '\n';
    }
}

Placement parse_placement(std::istream &in, PlacementStrategy strategy) {
    Placement placement;
    placement.strategy = strategy;
    std::string line;
    std::size_t line_no = 0;
    std::uint32_t max_expert = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty())
            continue;
        auto colon = line.find(':');
        if (colon == std::string::npos)
            throw ParseError(line_no, "expected 'group_id: e1 e2 ...'");
        std::uint32_t group_id = 0;
        try {
            group_id = static_cast<std::uint32_t>(std::stoul(line.substr(0, colon)));
        } catch (const std::exception &) {
            throw ParseError(line_no, "bad group id");
        }
        if (group_id != placement.groups.size())
            throw ParseError(line_no, "group ids must be consecutive from 0");
        std::istringstream rest(line.substr(colon + 1));
        std::vector<std::uint32_t> experts;
        std::uint32_t e;
        while (rest >> e) {
            experts.push_back(e);
            max_expert = std::max(max_expert, e);
        }
        if (rest.fail() && !rest.eof())
            throw ParseError(line_no, "bad expert id");
        if (experts.empty())
            throw ParseError(line_no, "empty group");
        placement.groups.push_back(std::move(experts));
    }
    if (placement.groups.empty())
        throw ValidationError("placement file contains no groups");
    placement.E = max_expert + 1;
    placement.M = static_cast<std::uint32_t>(placement.groups[0].size());
    placement.R_redundancy = placement.M * placement.D() - placement.E;
    placement.verify();
    return placement;
}

void write_placement_file(const Placement &placement, const std::string &path) {
    std::ofstream out(path);
    if (!out)
        throw Error("cannot open placement file for writing: " + path);
    write_placement(placement, out);
}

Placement read_placement_file(const std::string &path, PlacementStrategy strategy) {
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open placement file: " + path);
    return parse_placement(in, strategy);
}

} // namespace moeplace
