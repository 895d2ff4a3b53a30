// SPDX-License-Identifier: Apache-2.0
#include "moeplace/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace moeplace {

using nlohmann::json;

namespace {

template <typename T> void read_if(const json &j, const char *key, T &out) {
    if (j.contains(key))
        out = j.at(key).get<T>();
}

void parse_model(const json &j, ModelConfig &model) {
    read_if(j, "name", model.name);
    read_if(j, "num_experts_per_layer", model.num_experts_per_layer);
    read_if(j, "top_k", model.top_k);
    read_if(j, "num_moe_layers", model.num_moe_layers);
    read_if(j, "has_shared_expert", model.has_shared_expert);
}

void parse_topology(const json &j, Topology &topo) {
    read_if(j, "dp", topo.dp);
    read_if(j, "tp", topo.tp);
    read_if(j, "ep", topo.ep);
    read_if(j, "tp_exp", topo.tp_exp);
    read_if(j, "nodes", topo.nodes);
    if (j.contains("gpus_per_node"))
        topo.gpus_per_node = j.at("gpus_per_node").get<std::uint32_t>();
    else if (topo.nodes > 0)
        topo.gpus_per_node = topo.dp * topo.tp / topo.nodes;
    if (j.contains("group_to_node")) {
        topo.group_to_node = j.at("group_to_node").get<std::vector<std::uint32_t>>();
    } else {
        // contiguous default: ep/nodes groups per node
        if (topo.nodes == 0 || topo.ep % topo.nodes != 0)
            throw ConfigError("topology: nodes must divide ep for the contiguous default");
        topo.group_to_node.resize(topo.ep);
        for (std::uint32_t g = 0; g < topo.ep; ++g)
            topo.group_to_node[g] = g / (topo.ep / topo.nodes);
    }
}

void parse_cost(const json &j, CostModelParams &cost) {
    read_if(j, "hidden_dim", cost.hidden_dim);
    read_if(j, "bytes_per_element", cost.bytes_per_element);
    read_if(j, "inter_node_bandwidth", cost.inter_node_bandwidth);
    read_if(j, "intra_node_bandwidth", cost.intra_node_bandwidth);
    read_if(j, "expert_time_per_token", cost.expert_time_per_token);
    read_if(j, "fixed_layer_overhead", cost.fixed_layer_overhead);
}

void parse_clustering(const json &j, ClusteringConfig &c) {
    read_if(j, "K", c.K);
    read_if(j, "seed", c.seed);
    read_if(j, "max_iterations", c.max_iterations);
    read_if(j, "tolerance", c.tolerance);
    read_if(j, "restarts", c.restarts);
    read_if(j, "layer", c.layer);
    if (j.contains("stage"))
        c.stage = stage_from_name(j.at("stage").get<std::string>());
}

void parse_placement(const json &j, PlacementConfig &p) {
    if (j.contains("strategies")) {
        p.strategies.clear();
        for (const auto &name : j.at("strategies"))
            p.strategies.push_back(strategy_from_name(name.get<std::string>()));
    }
    read_if(j, "R_redundancy", p.R_redundancy);
    read_if(j, "seed", p.seed);
}

void parse_simulation(const json &j, SimulationConfig &s) {
    read_if(j, "batches", s.batches);
    read_if(j, "batch_size", s.batch_size);
    read_if(j, "seed", s.seed);
    read_if(j, "layer", s.layer);
}

void parse_classifier(const json &j, ClassifierConfig &c) {
    read_if(j, "train_fraction", c.split.train_fraction);
    read_if(j, "seed", c.split.seed);
    c.train.seed = c.split.seed;
    read_if(j, "learning_rate", c.train.learning_rate);
    read_if(j, "l2_penalty", c.train.l2_penalty);
    read_if(j, "epochs", c.train.epochs);
    read_if(j, "scale_features", c.train.scale_features);
}

void parse_synthetic(const json &j, SyntheticTraceSpec &s) {
    read_if(j, "num_domains", s.num_domains);
    read_if(j, "requests_per_domain", s.requests_per_domain);
    read_if(j, "preferred_experts_per_domain", s.preferred_experts_per_domain);
    read_if(j, "affinity", s.affinity);
    read_if(j, "decode_tokens_mean", s.decode_tokens_mean);
    read_if(j, "seed", s.seed);
}

} // namespace

RunConfig parse_run_config(const std::string &json_text) {
    json j = json::parse(json_text, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw ConfigError("config: not a JSON object");
    RunConfig config;
    try {
        if (j.contains("model"))
            parse_model(j.at("model"), config.model);
        if (j.contains("topology"))
            parse_topology(j.at("topology"), config.topology);
        if (j.contains("cost"))
            parse_cost(j.at("cost"), config.cost);
        if (j.contains("clustering"))
            parse_clustering(j.at("clustering"), config.clustering);
        if (j.contains("placement"))
            parse_placement(j.at("placement"), config.placement);
        if (j.contains("simulation"))
            parse_simulation(j.at("simulation"), config.simulation);
        if (j.contains("classifier"))
            parse_classifier(j.at("classifier"), config.classifier);
        if (j.contains("synthetic")) {
            parse_synthetic(j.at("synthetic"), config.synthetic);
            config.has_synthetic = true;
        }
    } catch (const ConfigError &) {
        throw;
    } catch (const std::exception &e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return config;
}

RunConfig load_run_config(const std::string &path) {
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config file: " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_run_config(buffer.str());
}

namespace {

json load_section(const std::string &path, const char *section) {
    std::ifstream in(path);
    if (!in)
        throw ConfigError(std::string("cannot open ") + section + " config: " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw ConfigError(std::string(section) + " config is not a JSON object: " + path);
    return j.contains(section) ? j.at(section) : j;
}

} // namespace

Topology load_topology_config(const std::string &path) {
    Topology topo;
    parse_topology(load_section(path, "topology"), topo);
    topo.validate();
    return topo;
}

CostModelParams load_cost_config(const std::string &path) {
    CostModelParams cost;
    parse_cost(load_section(path, "cost"), cost);
    cost.validate();
    return cost;
}

std::vector<std::string> validate_config(const RunConfig &config) {
    std::vector<std::string> violations;
    auto check = [&](bool ok, const std::string &what) {
        if (!ok)
            violations.push_back(what);
    };

    const auto &m = config.model;
    check(m.num_experts_per_layer >= 1, "model.num_experts_per_layer: must be >= 1");
    check(m.top_k >= 1, "model.top_k: must be >= 1");
    check(m.top_k <= m.num_experts_per_layer || m.num_experts_per_layer == 0,
          "model.top_k: must be <= num_experts_per_layer");
    check(m.num_moe_layers >= 1, "model.num_moe_layers: must be >= 1");

    const auto &t = config.topology;
    check(t.dp >= 1 && t.tp >= 1 && t.ep >= 1 && t.tp_exp >= 1 && t.nodes >= 1 &&
              t.gpus_per_node >= 1,
          "topology: all counts must be >= 1");
    check(t.ep * t.tp_exp == t.dp * t.tp, "topology: ep*tp_exp must equal dp*tp");
    check(t.gpus_per_node * t.nodes == t.dp * t.tp,
          "topology: gpus_per_node*nodes must equal dp*tp");
    check(t.group_to_node.size() == t.ep, "topology.group_to_node: one node per EP group");
    for (std::uint32_t n : t.group_to_node)
        if (n >= t.nodes) {
            violations.push_back("topology.group_to_node: node id out of range");
            break;
        }

    const auto &c = config.cost;
    check(c.hidden_dim >= 1, "cost.hidden_dim: must be >= 1");
    check(c.bytes_per_element >= 1, "cost.bytes_per_element: must be >= 1");
    check(c.inter_node_bandwidth > 0.0, "cost.inter_node_bandwidth: must be positive");
    check(c.intra_node_bandwidth >= c.inter_node_bandwidth,
          "cost.intra_node_bandwidth: must be >= inter_node_bandwidth");
    check(c.expert_time_per_token > 0.0, "cost.expert_time_per_token: must be positive");
    check(c.fixed_layer_overhead >= 0.0, "cost.fixed_layer_overhead: must be >= 0");

    check(config.clustering.max_iterations >= 1, "clustering.max_iterations: must be >= 1");
    check(config.clustering.tolerance >= 0.0, "clustering.tolerance: must be >= 0");
    check(config.clustering.restarts >= 1, "clustering.restarts: must be >= 1");

    const std::uint32_t E = m.num_experts_per_layer;
    const std::uint32_t D = t.ep;
    const std::uint32_t R = config.placement.R_redundancy;
    if (D >= 1 && E >= 1) {
        check((E + R) % D == 0,
              "placement.R_redundancy: (E + R) = " + std::to_string(E + R) +
                  " must be divisible by D = " + std::to_string(D) +
                  " so each group holds exactly M = (E+R)/D experts");
        for (PlacementStrategy s : config.placement.strategies)
            if (s != PlacementStrategy::data_based && E % D != 0) {
                violations.push_back(std::string("placement.strategies: ") + strategy_name(s) +
                                     " requires D to divide E");
                break;
            }
    }
    check(!config.placement.strategies.empty(), "placement.strategies: must not be empty");

    check(config.simulation.batches >= 1, "simulation.batches: must be >= 1");
    check(config.simulation.batch_size >= 1, "simulation.batch_size: must be >= 1");
    check(config.simulation.layer < m.num_moe_layers || m.num_moe_layers == 0,
          "simulation.layer: out of range");

    const auto &split = config.classifier.split;
    check(split.train_fraction > 0.0 && split.train_fraction < 1.0,
          "classifier.train_fraction: must be in (0, 1)");
    check(config.classifier.train.learning_rate > 0.0,
          "classifier.learning_rate: must be positive");
    check(config.classifier.train.l2_penalty >= 0.0, "classifier.l2_penalty: must be >= 0");

    if (config.has_synthetic) {
        const auto &s = config.synthetic;
        check(s.num_domains >= 1, "synthetic.num_domains: must be >= 1");
        check(s.requests_per_domain >= 1, "synthetic.requests_per_domain: must be >= 1");
        check(s.preferred_experts_per_domain <= E,
              "synthetic.preferred_experts_per_domain: must be <= E");
        check(s.preferred_experts_per_domain >= m.top_k,
              "synthetic.preferred_experts_per_domain: must be >= top_k");
        check(s.affinity >= 0.0 && s.affinity <= 1.0, "synthetic.affinity: must be in [0, 1]");
        check(s.decode_tokens_mean >= 1.0, "synthetic.decode_tokens_mean: must be >= 1");
    }
    return violations;
}

} // namespace moeplace
