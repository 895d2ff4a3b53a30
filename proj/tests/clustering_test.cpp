// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "moeplace/clustering.hpp"
#include "test_support.hpp"

using namespace moeplace;
using testsupport::make_matrix;

TEST_CASE("l2_normalize: 3-4-5 triangle") {
    auto out = l2_normalize(std::vector<double>{3.0, 4.0});
    CHECK(out[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(out[1] == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("l2_normalize keeps unit basis vectors") {
    auto out = l2_normalize(std::vector<double>{0.0, 1.0, 0.0});
    CHECK(out == std::vector<double>{0.0, 1.0, 0.0});
}

TEST_CASE("l2_normalize rejects the zero vector") {
    CHECK_THROWS_AS(l2_normalize(std::vector<double>{0.0, 0.0}), ValidationError);
}

TEST_CASE("l2_normalize yields unit norm and is idempotent") {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> value(0.0, 4.0);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> v(16);
        for (double &x : v)
            x = value(rng);
        v[0] += 0.1; // avoid the measure-zero zero vector
        auto once = l2_normalize(v);
        double norm = 0.0;
        for (double x : once)
            norm += x * x;
        CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-12);
        auto twice = l2_normalize(once);
        for (std::size_t i = 0; i < once.size(); ++i)
            CHECK(std::abs(twice[i] - once[i]) < 1e-12);
    }
}

TEST_CASE("kmeans with K=1 returns the row mean and total scatter") {
    std::vector<double> rows{0, 0, 2, 0, 0, 2, 2, 2};
    auto model = kmeans(rows, 4, 2, 1, 0);
    CHECK(model.K == 1);
    CHECK(model.centroid(0)[0] == doctest::Approx(1.0));
    CHECK(model.centroid(0)[1] == doctest::Approx(1.0));
    CHECK(model.objective == doctest::Approx(8.0)); // 4 corners at distance sqrt(2)
}

TEST_CASE("kmeans recovers well-separated planted clusters") {
    auto data = testsupport::make_planted_clouds(40, 8, 1.0, 25.0, 3);
    auto model = kmeans(data.rows, data.n, data.dim, 2, 12);
    CHECK(testsupport::adjusted_rand_index(model.labels, data.truth) == 1.0);
}

TEST_CASE("kmeans rejects more clusters than rows") {
    std::vector<double> rows{0, 0, 1, 1};
    CHECK_THROWS_AS(kmeans(rows, 2, 2, 3, 0), InfeasibleError);
}

TEST_CASE("kmeans best-of-20 seeds matches the exhaustive optimum on a tiny instance") {
    std::vector<double> rows{0.0, 0.0, 0.1, 0.0, 0.0, 0.1, 5.0, 5.0, 5.1, 5.0, 5.0, 5.1};
    double optimum = testsupport::exhaustive_two_partition_objective(rows, 6, 2);
    double best = std::numeric_limits<double>::infinity();
    for (std::uint64_t seed = 0; seed < 20; ++seed)
        best = std::min(best, kmeans(rows, 6, 2, 2, seed).objective);
    CHECK(std::abs(best - optimum) <= 1e-9);
}

TEST_CASE("kmeans objective history is non-increasing") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> value(0.0, 10.0);
    std::vector<double> rows(60 * 4);
    for (double &v : rows)
        v = value(rng);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto model = kmeans(rows, 60, 4, 5, seed);
        for (std::size_t i = 1; i < model.objective_history.size(); ++i)
            CHECK(model.objective_history[i] <= model.objective_history[i - 1] + 1e-9);
    }
}

TEST_CASE("kmeans labels are the nearest final centroid with low-id ties") {
    auto data = testsupport::make_planted_clouds(25, 3, 1.0, 12.0, 9);
    auto model = kmeans(data.rows, data.n, data.dim, 2, 4);
    for (std::size_t i = 0; i < data.n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        std::uint32_t best_k = 0;
        for (std::uint32_t k = 0; k < model.K; ++k) {
            double dist = 0.0;
            for (std::size_t c = 0; c < model.dim; ++c) {
                double d = data.rows[i * data.dim + c] - model.centroid(k)[c];
                dist += d * d;
            }
            if (dist < best) {
                best = dist;
                best_k = k;
            }
        }
        CHECK(model.labels[i] == best_k);
    }
}

TEST_CASE("kmeans never returns an empty cluster") {
    // 10 identical points force degenerate seeding and repair
    std::vector<double> rows(10 * 2, 1.0);
    auto model = kmeans(rows, 10, 2, 3, 0);
    std::set<std::uint32_t> seen(model.labels.begin(), model.labels.end());
    CHECK(seen.size() == 3);
}

TEST_CASE("kmeans is deterministic for a fixed seed") {
    auto data = testsupport::make_planted_clouds(30, 5, 2.0, 10.0, 44);
    auto a = kmeans(data.rows, data.n, data.dim, 3, 77);
    auto b = kmeans(data.rows, data.n, data.dim, 3, 77);
    CHECK(a.labels == b.labels);
    CHECK(a.centroids == b.centroids);
    CHECK(a.objective == b.objective);
}

TEST_CASE("cluster_sizes of a single cluster is the total token count") {
    auto matrix = make_matrix(3, 2, {1, 2, 3, 4, 5, 6});
    ClusterModel model;
    model.K = 1;
    model.dim = 2;
    model.labels = {0, 0, 0};
    model.centroids = {0, 0};
    auto sizes = cluster_sizes(model, matrix);
    REQUIRE(sizes.size() == 1);
    CHECK(sizes[0] == 21.0);
}

TEST_CASE("cluster_sizes separates per-cluster L1 norms") {
    auto matrix = make_matrix(2, 2, {2, 0, 0, 3});
    ClusterModel model;
    model.K = 2;
    model.dim = 2;
    model.labels = {0, 1};
    model.centroids = {0, 0, 0, 0};
    auto sizes = cluster_sizes(model, matrix);
    CHECK(sizes == std::vector<double>{2.0, 3.0});
}

TEST_CASE("cluster_sizes matches hand-summed three-cluster fixture") {
    auto matrix = make_matrix(5, 2, {1, 1, 2, 0, 0, 5, 3, 3, 1, 0});
    ClusterModel model;
    model.K = 3;
    model.dim = 2;
    model.labels = {0, 1, 1, 2, 0};
    model.centroids = std::vector<double>(6, 0.0);
    auto sizes = cluster_sizes(model, matrix);
    CHECK(sizes == std::vector<double>{3.0, 7.0, 6.0});
}

namespace {

ClusterModel labels_only_model(std::vector<std::uint32_t> labels, std::uint32_t K,
                               std::size_t dim) {
    ClusterModel model;
    model.K = K;
    model.dim = dim;
    model.labels = std::move(labels);
    model.centroids.assign(static_cast<std::size_t>(K) * dim, 0.0);
    return model;
}

} // namespace

TEST_CASE("assign_clusters_to_groups: K == D is the identity map") {
    auto matrix = make_matrix(3, 2, {1, 0, 0, 1, 1, 1});
    auto model = labels_only_model({0, 1, 2}, 3, 2);
    auto map = assign_clusters_to_groups(model, matrix, 3, 0);
    CHECK(map.assignment[0] == std::vector<std::uint32_t>{0});
    CHECK(map.assignment[1] == std::vector<std::uint32_t>{1});
    CHECK(map.assignment[2] == std::vector<std::uint32_t>{2});
}

TEST_CASE("assign_clusters_to_groups: D > K hands extras round-robin by size") {
    // s = [10, 4]: cluster 0 -> {0, 2, 4}, cluster 1 -> {1, 3}
    auto matrix = make_matrix(2, 2, {10, 0, 4, 0});
    auto model = labels_only_model({0, 1}, 2, 2);
    auto map = assign_clusters_to_groups(model, matrix, 5, 0);
    CHECK(map.assignment[0] == std::vector<std::uint32_t>{0, 2, 4});
    CHECK(map.assignment[1] == std::vector<std::uint32_t>{1, 3});
}

TEST_CASE("assign_clusters_to_groups: K > D merges clusters with close u vectors") {
    // u vectors pair up: clusters {0,1} on one axis, {2,3} on the other
    auto matrix = make_matrix(4, 2, {10, 0, 11, 0, 0, 10, 0, 11});
    auto model = labels_only_model({0, 1, 2, 3}, 4, 2);
    auto map = assign_clusters_to_groups(model, matrix, 2, 1);
    REQUIRE(map.assignment[0].size() == 1);
    CHECK(map.assignment[0] == map.assignment[1]);
    CHECK(map.assignment[2] == map.assignment[3]);
    CHECK(map.assignment[0] != map.assignment[2]);
}

TEST_CASE("assign_clusters_to_groups always covers every group") {
    std::mt19937_64 rng(55);
    std::uniform_real_distribution<double> value(0.0, 5.0);
    for (int trial = 0; trial < 60; ++trial) {
        std::uint32_t K = 1 + static_cast<std::uint32_t>(rng() % 6);
        std::uint32_t D = 1 + static_cast<std::uint32_t>(rng() % 6);
        std::size_t rows = K + rng() % 10;
        std::size_t dim = 2 + rng() % 4;
        std::vector<double> values(rows * dim);
        for (double &v : values)
            v = value(rng) + 0.01;
        std::vector<std::uint32_t> labels(rows);
        for (std::size_t i = 0; i < rows; ++i)
            labels[i] = i < K ? static_cast<std::uint32_t>(i)
                              : static_cast<std::uint32_t>(rng() % K);
        auto matrix = make_matrix(rows, dim, values);
        auto model = labels_only_model(labels, K, dim);
        auto map = assign_clusters_to_groups(model, matrix, D, trial);

        std::set<std::uint32_t> covered;
        for (std::uint32_t k = 0; k < K; ++k) {
            CHECK(!map.assignment[k].empty());
            covered.insert(map.assignment[k].begin(), map.assignment[k].end());
        }
        CHECK(covered.size() == D);
        CHECK(*covered.rbegin() == D - 1);

        if (D > K) {
            // group counts per cluster differ by at most one
            std::size_t mn = D, mx = 0;
            for (const auto &groups : map.assignment) {
                mn = std::min(mn, groups.size());
                mx = std::max(mx, groups.size());
            }
            CHECK(mx - mn <= 1);
        }
        if (K > D) {
            for (const auto &groups : map.assignment)
                CHECK(groups.size() == 1);
        }
    }
}

TEST_CASE("cluster model serialization round-trips") {
    auto data = testsupport::make_planted_clouds(10, 3, 1.0, 9.0, 6);
    auto model = kmeans(data.rows, data.n, data.dim, 2, 5);
    std::vector<std::uint64_t> ids(data.n);
    for (std::size_t i = 0; i < ids.size(); ++i)
        ids[i] = 100 + i;

    std::stringstream io;
    write_cluster_model(model, ids, io);
    auto stored = parse_cluster_model(io);
    CHECK(stored.model.K == model.K);
    CHECK(stored.model.dim == model.dim);
    CHECK(stored.model.labels == model.labels);
    CHECK(stored.request_ids == ids);
    for (std::size_t i = 0; i < model.centroids.size(); ++i)
        CHECK(stored.model.centroids[i] == doctest::Approx(model.centroids[i]).epsilon(1e-15));
}
