// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "moeplace/metrics.hpp"
#include "test_support.hpp"

using namespace moeplace;
using testsupport::make_matrix;

TEST_CASE("expert_load boundary case: all tokens on one expert of 16, top-1") {
    std::vector<double> counts(16, 0.0);
    counts[3] = 1000.0;
    auto loads = expert_load(counts, 1);
    CHECK(loads.loads[3] == 16.0);
    for (std::size_t e = 0; e < 16; ++e)
        if (e != 3)
            CHECK(loads.loads[e] == 0.0);
    CHECK(imbalance_factor(loads) == 16.0);
}

TEST_CASE("expert_load of uniform counts is exactly 1") {
    std::vector<double> counts(8, 12.0);
    auto loads = expert_load(counts, 2);
    for (double load : loads.loads)
        CHECK(load == 1.0);
    CHECK(imbalance_factor(loads) == 1.0);
}

TEST_CASE("expert_load hand fixture [1,1,2,4]") {
    auto loads = expert_load(std::vector<double>{1, 1, 2, 4}, 1);
    CHECK(loads.loads == std::vector<double>{0.5, 0.5, 1.0, 2.0});
    CHECK(imbalance_factor(loads) == 2.0);
}

TEST_CASE("expert_load rejects all-zero counts") {
    CHECK_THROWS_AS(expert_load(std::vector<double>{0, 0, 0}, 1), ValidationError);
}

TEST_CASE("expert_load mean is 1 for random nonzero counts") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> value(0.0, 50.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> counts(37);
        for (double &c : counts)
            c = value(rng);
        counts[trial % counts.size()] += 1.0; // ensure nonzero sum
        auto loads = expert_load(counts, 4);
        double mean = 0.0;
        for (double load : loads.loads)
            mean += load;
        mean /= static_cast<double>(loads.loads.size());
        CHECK(std::abs(mean - 1.0) < 1e-9);
        CHECK(imbalance_factor(loads) >= 1.0 - 1e-12);
    }
}

TEST_CASE("loads from a valid top-k trace never exceed E / top_k") {
    ModelConfig model{"m", 16, 4, 1, false};
    SyntheticTraceSpec spec{2, 40, 8, 0.95, 20.0, 8};
    auto records = generate_synthetic_trace(spec, model);
    auto matrix = build_activation_matrix(records, 16, 0, Stage::decode);
    std::vector<double> column_sums(16, 0.0);
    for (std::size_t r = 0; r < matrix.rows; ++r)
        for (std::size_t e = 0; e < 16; ++e)
            column_sums[e] += matrix.at(r, e);
    auto loads = expert_load(column_sums, model.top_k);
    double bound = 16.0 / 4.0;
    for (double load : loads.loads)
        CHECK(load <= bound + 1e-9);
}

TEST_CASE("pearson of identical nonconstant vectors is 1") {
    std::vector<double> x{1, 2, 3, 5, 8};
    CHECK(pearson(x, x) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("pearson of a vector and its negation is -1") {
    std::vector<double> x{1, 2, 3, 5, 8};
    std::vector<double> y{-1, -2, -3, -5, -8};
    CHECK(pearson(x, y) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("pearson of a constant vector is undefined, not 0") {
    std::vector<double> x{4, 4, 4, 4};
    std::vector<double> y{1, 2, 3, 4};
    CHECK_THROWS_AS(pearson(x, y), UndefinedCorrelationError);
    CHECK_THROWS_AS(pearson(y, x), UndefinedCorrelationError);
}

TEST_CASE("pearson matches the naive two-pass oracle on random pairs") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> value(0.0, 3.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::size_t n = 16 + static_cast<std::size_t>(trial) * 3;
        std::vector<double> x(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = value(rng);
            y[i] = 0.3 * x[i] + value(rng);
        }
        CHECK(std::abs(pearson(x, y) - testsupport::naive_pearson(x, y)) < 1e-12);
    }
}

TEST_CASE("pearson is symmetric and shift/scale invariant") {
    std::mt19937_64 rng(13);
    std::normal_distribution<double> value(0.0, 1.0);
    std::vector<double> x(64), y(64), scaled(64);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = value(rng);
        y[i] = value(rng);
        scaled[i] = 2.5 * x[i] + 7.0;
    }
    CHECK(pearson(x, y) == doctest::Approx(pearson(y, x)).epsilon(1e-14));
    CHECK(pearson(scaled, y) == doctest::Approx(pearson(x, y)).epsilon(1e-12));
    CHECK(pearson(x, y) >= -1.0);
    CHECK(pearson(x, y) <= 1.0);
}

TEST_CASE("dataset correlation of duplicated datasets is 1 off-diagonal") {
    auto matrix = make_matrix(4, 3, {1, 2, 3, 4, 5, 6, 1, 2, 3, 4, 5, 6},
                              {"alpha", "alpha", "beta", "beta"}, {0, 1, 2, 3});
    auto corr = dataset_correlation_matrix(matrix);
    REQUIRE(corr.size() == 2);
    CHECK(corr.at(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(corr.at(0, 0) == 1.0);
    CHECK(corr.at(1, 1) == 1.0);
}

TEST_CASE("dataset correlation is nonpositive for disjoint-support domains") {
    // two domains, 8 experts, affinity 1.0: counts anti-share support
    ModelConfig model{"m", 8, 2, 1, false};
    SyntheticTraceSpec spec{2, 30, 4, 1.0, 8.0, 2};
    auto records = generate_synthetic_trace(spec, model);
    auto matrix = build_activation_matrix(records, 8, 0, Stage::decode);
    auto corr = dataset_correlation_matrix(matrix);
    REQUIRE(corr.size() == 2);
    CHECK(corr.at(0, 1) <= 0.0);
}

TEST_CASE("dataset correlation over three datasets is 3x3 and symmetric") {
    auto matrix = make_matrix(3, 4, {1, 0, 2, 1, 0, 3, 1, 2, 2, 2, 0, 1}, {"a", "b", "c"});
    auto corr = dataset_correlation_matrix(matrix);
    REQUIRE(corr.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(corr.at(i, i) == 1.0);
        for (std::size_t j = 0; j < 3; ++j)
            CHECK(corr.at(i, j) == doctest::Approx(corr.at(j, i)).epsilon(1e-12));
    }
}

TEST_CASE("dataset correlation matches brute-force recomputation") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> value(0.0, 9.0);
    std::vector<double> values(6 * 5);
    for (double &v : values)
        v = value(rng);
    auto matrix = make_matrix(6, 5, values, {"a", "a", "b", "b", "c", "c"});
    auto corr = dataset_correlation_matrix(matrix);

    // brute force: sum rows per label, then the naive pearson oracle
    std::map<std::string, std::vector<double>> sums;
    for (std::size_t r = 0; r < matrix.rows; ++r) {
        auto &acc = sums.try_emplace(matrix.row_labels[r], std::vector<double>(5, 0.0))
                        .first->second;
        for (std::size_t c = 0; c < 5; ++c)
            acc[c] += matrix.at(r, c);
    }
    std::vector<std::string> labels{"a", "b", "c"};
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            if (i == j)
                continue;
            double expected = testsupport::naive_pearson(sums[labels[i]], sums[labels[j]]);
            CHECK(corr.at(i, j) == doctest::Approx(expected).epsilon(1e-10));
        }
}

TEST_CASE("dataset correlation requires at least two datasets") {
    auto matrix = make_matrix(2, 3, {1, 2, 3, 4, 5, 6}, {"only", "only"});
    CHECK_THROWS_AS(dataset_correlation_matrix(matrix), ValidationError);
}

TEST_CASE("prefill-decode correlation is 1 for proportional vectors") {
    auto prefill = make_matrix(2, 4, {1, 2, 3, 4, 1, 2, 3, 4});
    auto decode = make_matrix(1, 4, {3, 6, 9, 12});
    CHECK(prefill_decode_correlation(prefill, decode) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("prefill-decode correlation of disjoint supports on E=4 is -1") {
    auto prefill = make_matrix(1, 4, {1, 1, 0, 0});
    auto decode = make_matrix(1, 4, {0, 0, 1, 1});
    CHECK(prefill_decode_correlation(prefill, decode) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("prefill-decode correlation propagates undefined correlation") {
    auto prefill = make_matrix(1, 4, {2, 2, 2, 2});
    auto decode = make_matrix(1, 4, {0, 1, 2, 3});
    CHECK_THROWS_AS(prefill_decode_correlation(prefill, decode), UndefinedCorrelationError);
}
