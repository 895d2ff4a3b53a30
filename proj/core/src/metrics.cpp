// SPDX-License-Identifier: Apache-2.0
#include "moeplace/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace moeplace {

ExpertLoadVector expert_load(std::span<const double> per_expert_token_counts,
                             std::uint32_t top_k) {
    if (per_expert_token_counts.empty())
        throw ValidationError("expert_load: empty count vector");
    if (top_k == 0)
        throw ValidationError("expert_load: top_k must be >= 1");
    double sum = 0.0;
    for (double c : per_expert_token_counts) {
        if (c < 0.0)
            throw ValidationError("expert_load: negative count");
        sum += c;
    }
    if (sum == 0.0)
        throw ValidationError("expert_load: all-zero counts, load undefined");

    double balanced = sum / static_cast<double>(per_expert_token_counts.size());
    ExpertLoadVector out;
    out.loads.reserve(per_expert_token_counts.size());
    for (double c : per_expert_token_counts)
        out.loads.push_back(c / balanced);
    out.total_tokens = static_cast<std::uint64_t>(std::llround(sum / top_k));
    out.top_k = top_k;
    return out;
}

double imbalance_factor(const ExpertLoadVector &loads) {
    if (loads.loads.empty())
        throw ValidationError("imbalance_factor: empty load vector");
    return *std::max_element(loads.loads.begin(), loads.loads.end());
}

double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size())
        throw ValidationError("pearson: length mismatch");
    if (x.size() < 2)
        throw ValidationError("pearson: need at least 2 samples");
    const std::size_t n = x.size();
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);

    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double dx = x[i] - mx;
        double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0)
        throw UndefinedCorrelationError("pearson: constant input vector");
    double r = sxy / std::sqrt(sxx * syy);
    return std::clamp(r, -1.0, 1.0);
}

namespace {

std::map<std::string, std::vector<double>> sum_rows_by_label(const ActivationMatrix &m) {
    std::map<std::string, std::vector<double>> sums;
    for (std::size_t r = 0; r < m.rows; ++r) {
        auto [it, inserted] = sums.try_emplace(m.row_labels[r], std::vector<double>(m.cols, 0.0));
        auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols; ++c)
            it->second[c] += row[c];
    }
    return sums;
}

std::vector<double> sum_all_rows(const ActivationMatrix &m) {
    std::vector<double> sum(m.cols, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols; ++c)
            sum[c] += row[c];
    }
    return sum;
}

} // namespace

CorrelationMatrix dataset_correlation_matrix(const ActivationMatrix &matrix) {
    auto sums = sum_rows_by_label(matrix);
    if (sums.size() < 2)
        throw ValidationError("dataset_correlation_matrix: need >= 2 datasets, got " +
                              std::to_string(sums.size()));
    CorrelationMatrix out;
    out.labels.reserve(sums.size());
    std::vector<const std::vector<double> *> vectors;
    for (const auto &[label, vec] : sums) {
        out.labels.push_back(label);
        vectors.push_back(&vec);
    }
    const std::size_t n = out.labels.size();
    out.values.assign(n * n, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = 0; i < n; ++i) {
        out.values[i * n + i] = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            double r;
            try {
                r = pearson(*vectors[i], *vectors[j]);
            } catch (const UndefinedCorrelationError &) {
                continue; // stays NaN: missing, not zero
            }
            out.values[i * n + j] = r;
            out.values[j * n + i] = r;
        }
    }
    return out;
}

double prefill_decode_correlation(const ActivationMatrix &prefill,
                                  const ActivationMatrix &decode) {
    if (prefill.rows == 0 || decode.rows == 0)
        throw ValidationError("prefill_decode_correlation: empty matrix");
    if (prefill.cols != decode.cols)
        throw ValidationError("prefill_decode_correlation: expert count mismatch");
    return pearson(sum_all_rows(prefill), sum_all_rows(decode));
}

} // namespace moeplace
