// SPDX-License-Identifier: Apache-2.0
#include "moeplace/trace.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

#include <json.hpp>

namespace moeplace {

using nlohmann::json;

const char *stage_name(Stage s) { return s == Stage::prefill ? "prefill" : "decode"; }

Stage stage_from_name(const std::string &name) {
    if (name == "prefill")
        return Stage::prefill;
    if (name == "decode")
        return Stage::decode;
    throw ValidationError("unknown stage '" + name + "' (expected prefill|decode)");
}

void ModelConfig::validate() const {
    if (num_experts_per_layer == 0)
        throw ConfigError("model '" + name + "': num_experts_per_layer must be >= 1");
    if (top_k < 1 || top_k > num_experts_per_layer)
        throw ConfigError("model '" + name + "': top_k must satisfy 1 <= top_k <= " +
                          std::to_string(num_experts_per_layer));
    if (num_moe_layers < 1)
        throw ConfigError("model '" + name + "': num_moe_layers must be >= 1");
}

namespace {

std::string record_name(const ActivationRecord &r) {
    return "record (dataset=" + r.dataset_label + ", request_id=" + std::to_string(r.request_id) +
           ", stage=" + stage_name(r.stage) + ", layer=" + std::to_string(r.layer_index) + ")";
}

} // namespace

void ActivationRecord::validate(const ModelConfig &model) const {
    if (expert_counts.empty())
        throw ValidationError(record_name(*this) + ": empty expert_counts");
    std::uint64_t sum = 0;
    for (const auto &[expert, count] : expert_counts) {
        if (expert >= model.num_experts_per_layer)
            throw ValidationError(record_name(*this) + ": expert id " + std::to_string(expert) +
                                  " >= E=" + std::to_string(model.num_experts_per_layer));
        if (count == 0)
            throw ValidationError(record_name(*this) + ": expert " + std::to_string(expert) +
                                  " has zero count");
        sum += count;
    }
    if (stage == Stage::decode) {
        std::uint64_t expected = generated_tokens * model.top_k;
        if (sum != expected)
            throw ValidationError(record_name(*this) + ": decode counts sum to " +
                                  std::to_string(sum) + ", expected generated_tokens*top_k=" +
                                  std::to_string(expected));
    }
}

double ActivationMatrix::total() const {
    double s = 0.0;
    for (double v : values)
        s += v;
    return s;
}

std::vector<ActivationRecord> parse_trace(std::istream &in, const ModelConfig &model) {
    model.validate();
    std::vector<ActivationRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos)
            continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw ParseError(line_no, "not a JSON object");

        ActivationRecord rec;
        try {
            rec.dataset_label = j.at("dataset").get<std::string>();
            rec.request_id = j.at("request_id").get<std::uint64_t>();
            rec.stage = stage_from_name(j.at("stage").get<std::string>());
            rec.layer_index = j.at("layer").get<std::uint32_t>();
            rec.input_length = j.at("input_len").get<std::uint64_t>();
            rec.generated_tokens = j.at("gen_tokens").get<std::uint64_t>();
            const json &experts = j.at("experts");
            if (!experts.is_object())
                throw ParseError(line_no, "'experts' must be an object");
            for (const auto &[key, value] : experts.items()) {
                std::size_t pos = 0;
                unsigned long id = std::stoul(key, &pos);
                if (pos != key.size())
                    throw ParseError(line_no, "expert id key '" + key + "' is not decimal");
                rec.expert_counts[static_cast<std::uint32_t>(id)] = value.get<std::uint64_t>();
            }
        } catch (const ParseError &) {
            throw;
        } catch (const ValidationError &e) {
            throw ParseError(line_no, e.what());
        } catch (const std::exception &e) {
            throw ParseError(line_no, e.what());
        }
        rec.validate(model);
        records.push_back(std::move(rec));
    }
    return records;
}

void write_trace(const std::vector<ActivationRecord> &records, std::ostream &out) {
    for (const auto &rec : records) {
        json experts = json::object();
        for (const auto &[expert, count] : rec.expert_counts)
            experts[std::to_string(expert)] = count;
        json j = {{"dataset", rec.dataset_label},
                  {"request_id", rec.request_id},
                  {"stage", stage_name(rec.stage)},
                  {"layer", rec.layer_index},
                  {"input_len", rec.input_length},
                  {"gen_tokens", rec.generated_tokens},
                  {"experts", experts}};
        out << j.dump() << '\n';
    }
}

std::vector<ActivationRecord> read_trace_file(const std::string &path, const ModelConfig &model) {
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open trace file: " + path);
    return parse_trace(in, model);
}

void write_trace_file(const std::vector<ActivationRecord> &records, const std::string &path) {
    std::ofstream out(path);
    if (!out)
        throw Error("cannot open trace file for writing: " + path);
    write_trace(records, out);
}

namespace {

ActivationMatrix build_matrix_filtered(const std::vector<ActivationRecord> &records,
                                       std::uint32_t num_experts, Stage stage,
                                       bool layer_filter, std::uint32_t layer_index) {
    // request_id -> (first-seen label, accumulated counts)
    std::map<std::uint64_t, std::pair<std::string, std::vector<double>>> by_request;
    for (const auto &rec : records) {
        if (rec.stage != stage)
            continue;
        if (layer_filter && rec.layer_index != layer_index)
            continue;
        auto [it, inserted] = by_request.try_emplace(
            rec.request_id, rec.dataset_label, std::vector<double>(num_experts, 0.0));
        for (const auto &[expert, count] : rec.expert_counts) {
            if (expert >= num_experts)
                throw ValidationError("expert id " + std::to_string(expert) +
                                      " >= E=" + std::to_string(num_experts));
            it->second.second[expert] += static_cast<double>(count);
        }
    }
    if (by_request.empty()) {
        std::string what = std::string("no ") + stage_name(stage) + " records";
        if (layer_filter)
            what += " at layer " + std::to_string(layer_index);
        throw EmptySelectionError(what);
    }

    ActivationMatrix m;
    m.rows = by_request.size();
    m.cols = num_experts;
    m.values.reserve(m.rows * m.cols);
    m.row_labels.reserve(m.rows);
    m.request_ids.reserve(m.rows);
    for (auto &[request_id, entry] : by_request) { // std::map iterates id-sorted
        m.request_ids.push_back(request_id);
        m.row_labels.push_back(std::move(entry.first));
        m.values.insert(m.values.end(), entry.second.begin(), entry.second.end());
    }
    return m;
}

} // namespace

ActivationMatrix build_activation_matrix(const std::vector<ActivationRecord> &records,
                                         std::uint32_t num_experts,
                                         std::uint32_t layer_index, Stage stage) {
    return build_matrix_filtered(records, num_experts, stage, true, layer_index);
}

ActivationMatrix build_activation_matrix_summed(const std::vector<ActivationRecord> &records,
                                                std::uint32_t num_experts, Stage stage) {
    return build_matrix_filtered(records, num_experts, stage, false, 0);
}

std::vector<std::uint32_t> layers_present(const std::vector<ActivationRecord> &records,
                                          Stage stage) {
    std::set<std::uint32_t> layers;
    for (const auto &rec : records)
        if (rec.stage == stage)
            layers.insert(rec.layer_index);
    return {layers.begin(), layers.end()};
}

std::vector<std::uint32_t> domain_preferred_experts(const SyntheticTraceSpec &spec,
                                                    const ModelConfig &model,
                                                    std::uint32_t domain) {
    std::vector<std::uint32_t> preferred(spec.preferred_experts_per_domain);
    std::uint64_t base = static_cast<std::uint64_t>(domain) * spec.preferred_experts_per_domain;
    for (std::uint32_t j = 0; j < spec.preferred_experts_per_domain; ++j)
        preferred[j] = static_cast<std::uint32_t>((base + j) % model.num_experts_per_layer);
    return preferred;
}

namespace {

void validate_spec(const SyntheticTraceSpec &spec, const ModelConfig &model) {
    model.validate();
    if (spec.num_domains == 0 || spec.requests_per_domain == 0)
        throw ConfigError("synthetic spec: num_domains and requests_per_domain must be >= 1");
    if (spec.preferred_experts_per_domain > model.num_experts_per_layer)
        throw ConfigError("synthetic spec: preferred_experts_per_domain > E");
    if (spec.preferred_experts_per_domain < model.top_k)
        throw ConfigError("synthetic spec: preferred set size " +
                          std::to_string(spec.preferred_experts_per_domain) +
                          " < top_k=" + std::to_string(model.top_k));
    if (spec.affinity < 0.0 || spec.affinity > 1.0)
        throw ConfigError("synthetic spec: affinity must be in [0, 1]");
    if (spec.decode_tokens_mean < 1.0)
        throw ConfigError("synthetic spec: decode_tokens_mean must be >= 1");
}

// Accumulates top_k distinct expert picks for `tokens` tokens.
void route_tokens(std::uint64_t tokens, std::uint32_t top_k, double affinity,
                  const std::vector<std::uint32_t> &preferred, std::uint32_t num_experts,
                  std::mt19937_64 &rng, std::map<std::uint32_t, std::uint64_t> &counts) {
    std::bernoulli_distribution use_preferred(affinity);
    std::uniform_int_distribution<std::uint32_t> pick_preferred(
        0, static_cast<std::uint32_t>(preferred.size()) - 1);
    std::uniform_int_distribution<std::uint32_t> pick_any(0, num_experts - 1);
    std::vector<std::uint32_t> chosen;
    chosen.reserve(top_k);
    for (std::uint64_t t = 0; t < tokens; ++t) {
        chosen.clear();
        while (chosen.size() < top_k) {
            std::uint32_t e = use_preferred(rng) ? preferred[pick_preferred(rng)] : pick_any(rng);
            if (std::find(chosen.begin(), chosen.end(), e) == chosen.end())
                chosen.push_back(e);
        }
        for (std::uint32_t e : chosen)
            ++counts[e];
    }
}

} // namespace

std::vector<ActivationRecord> generate_synthetic_trace(const SyntheticTraceSpec &spec,
                                                       const ModelConfig &model) {
    validate_spec(spec, model);
    std::mt19937_64 rng(spec.seed);
    // geometric(p)+1 has mean 1/p; p = 1/mean gives the requested mean with floor 1
    std::geometric_distribution<std::uint64_t> length_dist(1.0 / spec.decode_tokens_mean);

    std::vector<ActivationRecord> records;
    records.reserve(static_cast<std::size_t>(spec.num_domains) * spec.requests_per_domain * 2 *
                    model.num_moe_layers);
    for (std::uint32_t d = 0; d < spec.num_domains; ++d) {
        std::vector<std::uint32_t> preferred = domain_preferred_experts(spec, model, d);
        std::string label = "domain" + std::to_string(d);
        for (std::uint32_t r = 0; r < spec.requests_per_domain; ++r) {
            std::uint64_t request_id =
                static_cast<std::uint64_t>(d) * spec.requests_per_domain + r;
            std::uint64_t input_len = length_dist(rng) + 1;
            std::uint64_t gen_tokens = length_dist(rng) + 1;
            for (std::uint32_t layer = 0; layer < model.num_moe_layers; ++layer) {
                ActivationRecord pre{label, request_id, Stage::prefill, layer,
                                     input_len, gen_tokens, {}};
                route_tokens(input_len, model.top_k, spec.affinity, preferred,
                             model.num_experts_per_layer, rng, pre.expert_counts);
                records.push_back(std::move(pre));

                ActivationRecord dec{label, request_id, Stage::decode, layer,
                                     input_len, gen_tokens, {}};
                route_tokens(gen_tokens, model.top_k, spec.affinity, preferred,
                             model.num_experts_per_layer, rng, dec.expert_counts);
                records.push_back(std::move(dec));
            }
        }
    }
    return records;
}

} // namespace moeplace
