// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "moeplace/trace.hpp"

namespace moeplace {

/// K-means fit result. `objective_history` records the objective after each
/// Lloyd iteration and is non-increasing; the returned model never contains
/// an empty cluster.
struct ClusterModel {
    std::uint32_t K = 0;
    std::vector<std::uint32_t> labels;  // per row, in [0, K)
    std::vector<double> centroids;      // K x dim row-major
    std::size_t dim = 0;
    double objective = 0.0;             // sum of squared distances
    std::uint32_t iterations_run = 0;
    std::vector<double> objective_history;

    std::span<const double> centroid(std::size_t k) const {
        return std::span<const double>(centroids).subspan(k * dim, dim);
    }
};

/// Cluster-to-expert-group assignment: each of the K request clusters maps
/// to a nonempty set of group ids whose union covers [0, D).
struct GroupMap {
    std::uint32_t K = 0;
    std::uint32_t D = 0;
    std::vector<std::vector<std::uint32_t>> assignment; // per cluster, sorted group ids
    std::vector<double> cluster_sizes;                  // s_k = sum of L1 row norms
};

/// Scales to unit L2 norm. Zero vectors signal corrupt input and throw
/// ValidationError (trace rows are guaranteed nonzero).
std::vector<double> l2_normalize(std::span<const double> a);

/// Row-wise L2 normalization of an activation matrix.
ActivationMatrix l2_normalize_rows(const ActivationMatrix &matrix);

/// Lloyd's algorithm with k-means++ seeding. Stops when the largest centroid
/// movement drops below `tolerance` or after `max_iterations`. Deterministic
/// for a fixed seed; distance ties break toward the lowest cluster id; an
/// emptied cluster is repaired by moving the point farthest from its
/// centroid into it. Throws InfeasibleError when rows < K.
ClusterModel kmeans(std::span<const double> rows, std::size_t n_rows, std::size_t dim,
                    std::uint32_t K, std::uint64_t seed, std::uint32_t max_iterations = 100,
                    double tolerance = 1e-6);

/// s_k = sum over rows of cluster k of the row's L1 norm, computed on the
/// raw (un-normalized) matrix.
std::vector<double> cluster_sizes(const ClusterModel &model, const ActivationMatrix &raw_matrix);

/// Maps K request clusters onto D expert groups.
///   K == D: identity bijection.
///   D >  K: one group per cluster, then the remaining D-K groups handed
///           round-robin to clusters in descending s_k order.
///   K >  D: per-cluster summed raw vectors u_k are k-means-clustered into D
///           meta-clusters; each cluster maps to its meta-cluster's group.
GroupMap assign_clusters_to_groups(const ClusterModel &model, const ActivationMatrix &raw_matrix,
                                   std::uint32_t D, std::uint64_t seed);

/// Serialized model format (plain text): K/E/R header lines, one
/// `centroid <k> v...` line per cluster, then `labels` and `request_ids`
/// lines aligned with the clustered matrix rows.
void write_cluster_model(const ClusterModel &model, std::span<const std::uint64_t> request_ids,
                         std::ostream &out);

struct StoredClusterModel {
    ClusterModel model;
    std::vector<std::uint64_t> request_ids;
};

StoredClusterModel parse_cluster_model(std::istream &in);

} // namespace moeplace
