// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "moeplace/errors.hpp"

namespace moeplace {

enum class Stage { prefill, decode };

const char *stage_name(Stage s);
Stage stage_from_name(const std::string &name);

/// Architecture parameters of the model a trace was collected from.
struct ModelConfig {
    std::string name;
    std::uint32_t num_experts_per_layer = 0; // E
    std::uint32_t top_k = 0;                 // experts activated per token
    std::uint32_t num_moe_layers = 0;
    bool has_shared_expert = false;

    /// Throws ConfigError unless 1 <= top_k <= E and num_moe_layers >= 1.
    void validate() const;
};

/// One (request, layer, stage) observation: how many tokens the request
/// routed to each expert of that layer during that stage.
struct ActivationRecord {
    std::string dataset_label;
    std::uint64_t request_id = 0;
    Stage stage = Stage::prefill;
    std::uint32_t layer_index = 0;
    std::uint64_t input_length = 0;    // prompt tokens
    std::uint64_t generated_tokens = 0;
    std::map<std::uint32_t, std::uint64_t> expert_counts; // expert id -> tokens

    /// Checks expert ids against E, non-empty counts >= 1, and for decode
    /// records that counts sum to generated_tokens * top_k.
    void validate(const ModelConfig &model) const;

    bool operator==(const ActivationRecord &) const = default;
};

/// Dense [R x E] request-by-expert token-count matrix for one (layer, stage)
/// selection. Rows are sorted by request_id.
struct ActivationMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values; // row-major
    std::vector<std::string> row_labels;
    std::vector<std::uint64_t> request_ids;

    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    double &at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    std::span<const double> row(std::size_t r) const {
        return std::span<const double>(values).subspan(r * cols, cols);
    }
    double total() const;
};

/// Parameters for planting domain structure into a synthetic trace: each
/// domain owns a preferred expert subset and routes each token's expert
/// choices there with probability `affinity`.
struct SyntheticTraceSpec {
    std::uint32_t num_domains = 0;
    std::uint32_t requests_per_domain = 0;
    std::uint32_t preferred_experts_per_domain = 0;
    double affinity = 0.0;          // in [0, 1]
    double decode_tokens_mean = 1.0; // geometric mean, floor 1
    std::uint64_t seed = 0;
};

/// Parses newline-delimited trace records. Every well-formed line yields one
/// record validated against `model`; blank lines are skipped. Malformed
/// lines raise ParseError with the line number, invariant violations raise
/// ValidationError naming the record.
std::vector<ActivationRecord> parse_trace(std::istream &in, const ModelConfig &model);

/// Inverse of parse_trace: one line per record, parse(write(r)) == r.
void write_trace(const std::vector<ActivationRecord> &records, std::ostream &out);

std::vector<ActivationRecord> read_trace_file(const std::string &path, const ModelConfig &model);
void write_trace_file(const std::vector<ActivationRecord> &records, const std::string &path);

/// Builds the [R x E] matrix for one (layer, stage); counts from multiple
/// records of the same request are summed. Throws EmptySelectionError when
/// nothing matches.
ActivationMatrix build_activation_matrix(const std::vector<ActivationRecord> &records,
                                         std::uint32_t num_experts,
                                         std::uint32_t layer_index, Stage stage);

/// Same, but sums over every layer: one row per request with its
/// whole-model per-expert totals for the stage.
ActivationMatrix build_activation_matrix_summed(const std::vector<ActivationRecord> &records,
                                                std::uint32_t num_experts, Stage stage);

/// Ascending list of layer indices present in the records for a stage.
std::vector<std::uint32_t> layers_present(const std::vector<ActivationRecord> &records,
                                          Stage stage);

/// Deterministic synthetic trace with planted domains. Emits one prefill and
/// one decode record per (request, layer). Token expert choices are drawn
/// without replacement within a token: each of top_k picks comes from the
/// domain's preferred set with probability spec.affinity, else uniformly
/// over all E experts.
std::vector<ActivationRecord> generate_synthetic_trace(const SyntheticTraceSpec &spec,
                                                       const ModelConfig &model);

/// Preferred expert set of one domain under `spec` (contiguous blocks,
/// pairwise disjoint whenever num_domains * preferred_experts_per_domain <= E).
std::vector<std::uint32_t> domain_preferred_experts(const SyntheticTraceSpec &spec,
                                                    const ModelConfig &model,
                                                    std::uint32_t domain);

} // namespace moeplace
