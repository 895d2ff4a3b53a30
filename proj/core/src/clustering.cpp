// SPDX-License-Identifier: Apache-2.0
#include "moeplace/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "moeplace/text.hpp"

namespace moeplace {

std::vector<double> l2_normalize(std::span<const double> a) {
    double norm_sq = 0.0;
    for (double v : a)
        norm_sq += v * v;
    if (norm_sq == 0.0)
        throw ValidationError("l2_normalize: zero vector");
    double inv = 1.0 / std::sqrt(norm_sq);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        out[i] = a[i] * inv;
    return out;
}

ActivationMatrix l2_normalize_rows(const ActivationMatrix &matrix) {
    ActivationMatrix out = matrix;
    for (std::size_t r = 0; r < matrix.rows; ++r) {
        auto normalized = l2_normalize(matrix.row(r));
        std::copy(normalized.begin(), normalized.end(), out.values.begin() + r * matrix.cols);
    }
    return out;
}

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

std::span<const double> row_of(std::span<const double> rows, std::size_t dim, std::size_t i) {
    return rows.subspan(i * dim, dim);
}

// k-means++ seeding: first center uniform, each next with probability
// proportional to squared distance from the nearest chosen center.
std::vector<double> kmeanspp_init(std::span<const double> rows, std::size_t n, std::size_t dim,
                                  std::uint32_t K, std::mt19937_64 &rng) {
    std::vector<double> centroids;
    centroids.reserve(static_cast<std::size_t>(K) * dim);
    std::vector<bool> used(n, false);

    std::uniform_int_distribution<std::size_t> uniform_row(0, n - 1);
    std::size_t first = uniform_row(rng);
    used[first] = true;
    auto fr = row_of(rows, dim, first);
    centroids.insert(centroids.end(), fr.begin(), fr.end());

    std::vector<double> min_dist(n);
    for (std::size_t i = 0; i < n; ++i)
        min_dist[i] = sq_dist(row_of(rows, dim, i), fr);

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::uint32_t k = 1; k < K; ++k) {
        double total = std::accumulate(min_dist.begin(), min_dist.end(), 0.0);
        std::size_t chosen = n; // sentinel
        if (total > 0.0) {
            double target = unit(rng) * total;
            double cum = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                cum += min_dist[i];
                if (cum >= target) {
                    chosen = i;
                    break;
                }
            }
            if (chosen == n)
                chosen = n - 1; // rounding fallthrough
        } else {
            // all points coincide with existing centers; take the lowest unused row
            for (std::size_t i = 0; i < n; ++i)
                if (!used[i]) {
                    chosen = i;
                    break;
                }
            if (chosen == n)
                chosen = 0;
        }
        used[chosen] = true;
        auto cr = row_of(rows, dim, chosen);
        centroids.insert(centroids.end(), cr.begin(), cr.end());
        for (std::size_t i = 0; i < n; ++i)
            min_dist[i] = std::min(min_dist[i], sq_dist(row_of(rows, dim, i), cr));
    }
    return centroids;
}

// Nearest-centroid labels, ties to the lowest cluster id.
void assign_labels(std::span<const double> rows, std::size_t n, std::size_t dim,
                   const std::vector<double> &centroids, std::uint32_t K,
                   std::vector<std::uint32_t> &labels) {
    for (std::size_t i = 0; i < n; ++i) {
        auto point = row_of(rows, dim, i);
        double best = std::numeric_limits<double>::infinity();
        std::uint32_t best_k = 0;
        for (std::uint32_t k = 0; k < K; ++k) {
            double d = sq_dist(point, std::span<const double>(centroids).subspan(k * dim, dim));
            if (d < best) {
                best = d;
                best_k = k;
            }
        }
        labels[i] = best_k;
    }
}

// Moves the point farthest from its centroid into each empty cluster and
// pins that cluster's centroid to the point, so the objective cannot rise.
void repair_empty_clusters(std::span<const double> rows, std::size_t n, std::size_t dim,
                           std::vector<double> &centroids, std::uint32_t K,
                           std::vector<std::uint32_t> &labels) {
    std::vector<std::size_t> sizes(K, 0);
    for (std::uint32_t l : labels)
        ++sizes[l];
    for (std::uint32_t k = 0; k < K; ++k) {
        if (sizes[k] > 0)
            continue;
        double worst = -1.0;
        std::size_t victim = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (sizes[labels[i]] <= 1)
                continue; // never empty another cluster
            double d = sq_dist(row_of(rows, dim, i),
                               std::span<const double>(centroids).subspan(labels[i] * dim, dim));
            if (d > worst) {
                worst = d;
                victim = i;
            }
        }
        if (victim == n)
            throw InfeasibleError("kmeans: cannot repair empty cluster");
        --sizes[labels[victim]];
        labels[victim] = k;
        sizes[k] = 1;
        auto vr = row_of(rows, dim, victim);
        std::copy(vr.begin(), vr.end(), centroids.begin() + k * dim);
    }
}

double objective_value(std::span<const double> rows, std::size_t n, std::size_t dim,
                       const std::vector<double> &centroids,
                       const std::vector<std::uint32_t> &labels) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        total += sq_dist(row_of(rows, dim, i),
                         std::span<const double>(centroids).subspan(labels[i] * dim, dim));
    return total;
}

} // namespace

ClusterModel kmeans(std::span<const double> rows, std::size_t n_rows, std::size_t dim,
                    std::uint32_t K, std::uint64_t seed, std::uint32_t max_iterations,
                    double tolerance) {
    if (K < 1)
        throw InfeasibleError("kmeans: K must be >= 1");
    if (n_rows < K)
        throw InfeasibleError("kmeans: " + std::to_string(n_rows) + " rows < K=" +
                              std::to_string(K));
    if (rows.size() != n_rows * dim)
        throw ValidationError("kmeans: rows span size does not match n_rows * dim");

    std::mt19937_64 rng(seed);
    ClusterModel model;
    model.K = K;
    model.dim = dim;
    model.centroids = kmeanspp_init(rows, n_rows, dim, K, rng);
    model.labels.assign(n_rows, 0);

    std::vector<double> prev_centroids(model.centroids.size());
    std::vector<double> sums(static_cast<std::size_t>(K) * dim);
    std::vector<std::size_t> counts(K);

    std::uint32_t iter = 0;
    for (; iter < max_iterations; ++iter) {
        assign_labels(rows, n_rows, dim, model.centroids, K, model.labels);
        repair_empty_clusters(rows, n_rows, dim, model.centroids, K, model.labels);

        prev_centroids = model.centroids;
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n_rows; ++i) {
            auto point = row_of(rows, dim, i);
            double *acc = sums.data() + static_cast<std::size_t>(model.labels[i]) * dim;
            for (std::size_t c = 0; c < dim; ++c)
                acc[c] += point[c];
            ++counts[model.labels[i]];
        }
        for (std::uint32_t k = 0; k < K; ++k)
            for (std::size_t c = 0; c < dim; ++c)
                model.centroids[k * dim + c] = sums[k * dim + c] / static_cast<double>(counts[k]);

        model.objective_history.push_back(
            objective_value(rows, n_rows, dim, model.centroids, model.labels));

        double movement = 0.0;
        for (std::uint32_t k = 0; k < K; ++k)
            movement = std::max(movement, std::sqrt(sq_dist(
                std::span<const double>(model.centroids).subspan(k * dim, dim),
                std::span<const double>(prev_centroids).subspan(k * dim, dim))));
        if (movement < tolerance) {
            ++iter;
            break;
        }
    }
    model.iterations_run = iter;

    // Returned labels are the argmin assignment to the final centroids.
    assign_labels(rows, n_rows, dim, model.centroids, K, model.labels);
    repair_empty_clusters(rows, n_rows, dim, model.centroids, K, model.labels);
    model.objective = objective_value(rows, n_rows, dim, model.centroids, model.labels);
    return model;
}

std::vector<double> cluster_sizes(const ClusterModel &model, const ActivationMatrix &raw_matrix) {
    if (raw_matrix.rows != model.labels.size())
        throw ValidationError("cluster_sizes: matrix row count does not match labels");
    std::vector<double> sizes(model.K, 0.0);
    for (std::size_t r = 0; r < raw_matrix.rows; ++r) {
        double l1 = 0.0;
        for (double v : raw_matrix.row(r))
            l1 += std::abs(v);
        sizes[model.labels[r]] += l1;
    }
    return sizes;
}

GroupMap assign_clusters_to_groups(const ClusterModel &model, const ActivationMatrix &raw_matrix,
                                   std::uint32_t D, std::uint64_t seed) {
    if (D < 1)
        throw InfeasibleError("assign_clusters_to_groups: D must be >= 1");
    const std::uint32_t K = model.K;

    GroupMap map;
    map.K = K;
    map.D = D;
    map.cluster_sizes = cluster_sizes(model, raw_matrix);
    map.assignment.assign(K, {});

    if (K == D) {
        for (std::uint32_t k = 0; k < K; ++k)
            map.assignment[k] = {k};
        return map;
    }

    if (D > K) {
        // Clusters in descending size order (ties to the lower index) take one
        // group each, then the D-K extras round-robin in the same order.
        std::vector<std::uint32_t> order(K);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
            return map.cluster_sizes[a] > map.cluster_sizes[b];
        });
        std::uint32_t next_group = 0;
        for (std::uint32_t pos = 0; pos < K; ++pos)
            map.assignment[order[pos]].push_back(next_group++);
        std::uint32_t pos = 0;
        while (next_group < D) {
            map.assignment[order[pos % K]].push_back(next_group++);
            ++pos;
        }
        for (auto &groups : map.assignment)
            std::sort(groups.begin(), groups.end());
        return map;
    }

    // K > D: secondary k-means over the per-cluster summed raw vectors u_k.
    const std::size_t dim = raw_matrix.cols;
    std::vector<double> u(static_cast<std::size_t>(K) * dim, 0.0);
    for (std::size_t r = 0; r < raw_matrix.rows; ++r) {
        double *acc = u.data() + static_cast<std::size_t>(model.labels[r]) * dim;
        auto row = raw_matrix.row(r);
        for (std::size_t c = 0; c < dim; ++c)
            acc[c] += row[c];
    }
    ClusterModel meta = kmeans(u, K, dim, D, seed);
    for (std::uint32_t k = 0; k < K; ++k)
        map.assignment[k] = {meta.labels[k]};

    // Every group must own at least one cluster; repair by stealing the
    // largest cluster from the most-populated group.
    std::vector<std::vector<std::uint32_t>> members(D);
    for (std::uint32_t k = 0; k < K; ++k)
        members[map.assignment[k][0]].push_back(k);
    for (std::uint32_t g = 0; g < D; ++g) {
        if (!members[g].empty())
            continue;
        std::uint32_t donor = 0;
        for (std::uint32_t d = 1; d < D; ++d)
            if (members[d].size() > members[donor].size())
                donor = d;
        if (members[donor].size() < 2)
            throw InfeasibleError("assign_clusters_to_groups: cannot repair empty group");
        std::uint32_t stolen = members[donor][0];
        for (std::uint32_t k : members[donor])
            if (map.cluster_sizes[k] > map.cluster_sizes[stolen])
                stolen = k;
        members[donor].erase(std::find(members[donor].begin(), members[donor].end(), stolen));
        members[g].push_back(stolen);
        map.assignment[stolen] = {g};
    }
    return map;
}

void write_cluster_model(const ClusterModel &model, std::span<const std::uint64_t> request_ids,
                         std::ostream &out) {
    out << "K " << model.K << '\n';
    out << "E " << model.dim << '\n';
    out << "R " << model.labels.size() << '\n';
    for (std::uint32_t k = 0; k < model.K; ++k) {
        out << "centroid " << k;
        for (double v : model.centroid(k))
            out << ' ' << fmt_double(v, 17);
        out << '\n';
    }
    out << "labels";
    for (std::uint32_t l : model.labels)
        out << ' ' << l;
    out << '\n';
    out << "request_ids";
    for (std::uint64_t id : request_ids)
        out << ' ' << id;
    out << '\n';
}

StoredClusterModel parse_cluster_model(std::istream &in) {
    StoredClusterModel stored;
    ClusterModel &model = stored.model;
    std::string line;
    std::size_t line_no = 0;
    std::size_t n_rows = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty())
            continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "K") {
            ls >> model.K;
        } else if (key == "E") {
            ls >> model.dim;
        } else if (key == "R") {
            ls >> n_rows;
        } else if (key == "centroid") {
            std::uint32_t k = 0;
            ls >> k;
            if (model.dim == 0 || k >= model.K)
                throw ParseError(line_no, "centroid line before header or k out of range");
            if (model.centroids.size() < static_cast<std::size_t>(model.K) * model.dim)
                model.centroids.resize(static_cast<std::size_t>(model.K) * model.dim, 0.0);
            for (std::size_t c = 0; c < model.dim; ++c)
                if (!(ls >> model.centroids[k * model.dim + c]))
                    throw ParseError(line_no, "short centroid row");
        } else if (key == "labels") {
            std::uint32_t l;
            while (ls >> l)
                model.labels.push_back(l);
        } else if (key == "request_ids") {
            std::uint64_t id;
            while (ls >> id)
                stored.request_ids.push_back(id);
        } else {
            throw ParseError(line_no, "unknown key '" + key + "'");
        }
        if (ls.fail() && !ls.eof())
            throw ParseError(line_no, "malformed value for key '" + key + "'");
    }
    if (model.K == 0 || model.dim == 0)
        throw ValidationError("cluster model: missing K/E header");
    if (model.labels.size() != n_rows || stored.request_ids.size() != n_rows)
        throw ValidationError("cluster model: labels/request_ids length does not match R");
    for (std::uint32_t l : model.labels)
        if (l >= model.K)
            throw ValidationError("cluster model: label out of range");
    return stored;
}

} // namespace moeplace
