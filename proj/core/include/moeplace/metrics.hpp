// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moeplace/trace.hpp"

namespace moeplace {

/// Per-expert load relative to the perfectly balanced share: load_e =
/// counts_e / (sum(counts) / E). Mean load is 1 by construction; for valid
/// top-k routed traces each entry is bounded by E / top_k.
struct ExpertLoadVector {
    std::vector<double> loads;
    std::uint64_t total_tokens = 0; // routed (token, expert) pairs / top_k
    std::uint32_t top_k = 1;
};

ExpertLoadVector expert_load(std::span<const double> per_expert_token_counts,
                             std::uint32_t top_k);

/// Imbalance Factor of a layer: max expert load. 1.0 iff perfectly balanced.
double imbalance_factor(const ExpertLoadVector &loads);

/// Sample Pearson correlation. Throws UndefinedCorrelationError when either
/// vector is constant (reported upstream as a missing value, never 0).
double pearson(std::span<const double> x, std::span<const double> y);

/// Symmetric dataset-by-dataset correlation matrix; NaN marks entries whose
/// correlation is undefined (constant summed vector).
struct CorrelationMatrix {
    std::vector<std::string> labels;
    std::vector<double> values; // n x n row-major

    std::size_t size() const { return labels.size(); }
    double at(std::size_t i, std::size_t j) const { return values[i * labels.size() + j]; }
};

/// Sums the matrix rows per dataset label into one length-E vector each and
/// correlates every pair. Requires >= 2 distinct labels.
CorrelationMatrix dataset_correlation_matrix(const ActivationMatrix &matrix);

/// Pearson correlation between the request-summed per-expert vectors of a
/// prefill and a decode matrix for one layer.
double prefill_decode_correlation(const ActivationMatrix &prefill,
                                  const ActivationMatrix &decode);

} // namespace moeplace
