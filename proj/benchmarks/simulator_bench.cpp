// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <random>

#include "moeplace/simulator.hpp"

using namespace moeplace;

namespace {

BatchAssignment random_batch(std::uint32_t requests, std::uint32_t E, std::uint32_t D,
                             std::uint32_t experts_per_request, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::uint32_t> expert(0, E - 1);
    std::uniform_int_distribution<std::uint32_t> group(0, D - 1);
    std::uniform_int_distribution<std::uint32_t> count(1, 8);
    BatchAssignment batch;
    batch.requests.reserve(requests);
    for (std::uint32_t r = 0; r < requests; ++r) {
        BatchRequest request;
        request.request_id = r;
        request.source_group = group(rng);
        for (std::uint32_t e = 0; e < experts_per_request; ++e)
            request.expert_counts.emplace_back(expert(rng), count(rng));
        batch.requests.push_back(std::move(request));
    }
    return batch;
}

void BM_SimulateLayer(benchmark::State &state) {
    const auto requests = static_cast<std::uint32_t>(state.range(0));
    const std::uint32_t E = 256, D = 8;
    auto placement = linear_placement(E, D);
    auto topology = Topology::contiguous(8, 1, 8, 1, 2);
    CostModelParams cost;
    auto batch = random_batch(requests, E, D, 16, 11);
    for (auto _ : state) {
        auto sim = simulate_layer(batch, placement, topology, cost);
        benchmark::DoNotOptimize(sim);
    }
    state.SetItemsProcessed(state.iterations() * requests);
}
BENCHMARK(BM_SimulateLayer)->Arg(128)->Arg(1024)->Arg(8192);

void BM_PaddedAllToAll(benchmark::State &state) {
    auto topology = Topology::contiguous(16, 1, 16, 1, 4);
    CostModelParams cost;
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> value(0.0, 1e8);
    std::vector<double> payloads(16);
    for (double &p : payloads)
        p = value(rng);
    for (auto _ : state) {
        double t = padded_all_to_all_time(payloads, topology, cost);
        benchmark::DoNotOptimize(t);
    }
}
BENCHMARK(BM_PaddedAllToAll);

} // namespace

BENCHMARK_MAIN();
