// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "moeplace/config.hpp"
#include "moeplace/simulator.hpp"

namespace moeplace {

struct PipelineResult {
    bool ok = false;
    std::string failed_stage; // empty on success
    std::string error;
    std::vector<std::string> artifacts; // paths relative to the output directory
};

/// Runs synth-or-load -> analyze -> cluster -> place -> simulate -> classify
/// into `out_dir`, writing the CSV/report artifacts plus a manifest that
/// marks how far the run got. Stage failures stop the pipeline but keep the
/// artifacts written so far. The output directory is guarded by a lock file
/// against concurrent runs. `trace_path` may be empty when the config
/// carries a synthetic section. All outputs are deterministic functions of
/// (config, trace).
PipelineResult run_pipeline(const RunConfig &config, const std::string &trace_path,
                            const std::string &out_dir);

// ---- stage helpers shared by run_pipeline and the standalone subcommands ----

/// imbalance.csv, dataset_correlation_{prefill,decode}.csv,
/// prefill_decode_correlation.csv. Returns the artifact file names.
std::vector<std::string> emit_analysis(const std::vector<ActivationRecord> &records,
                                       const ModelConfig &model, const std::string &out_dir);

struct ClusterStage {
    ActivationMatrix matrix; // raw counts at the clustering granularity
    ClusterModel model;
    GroupMap group_map;
};

/// Builds the clustering matrix (stage + optional layer restriction),
/// normalizes, fits k-means (K = 0 resolves to the number of distinct
/// dataset labels) and assigns clusters to the D expert groups.
ClusterStage run_cluster_stage(const std::vector<ActivationRecord> &records,
                               const ModelConfig &model, const ClusteringConfig &clustering,
                               std::uint32_t D);

/// cluster_report.csv (`request_id,cluster,group_list`) and
/// cluster_model.txt.
std::vector<std::string> emit_cluster_artifacts(const ClusterStage &stage,
                                                const std::string &out_dir);

/// Placements for the requested strategies, computed from the clustering
/// matrix (EPLB from its column sums, data-based from aggregated usage).
std::vector<StrategyEntry> build_placements(const ClusterStage &stage,
                                            const PlacementConfig &placement);

/// Recommended groups per row of `matrix`, resolved through the clustered
/// request ids. Throws LookupError for rows that were never clustered.
std::vector<std::vector<std::uint32_t>> routing_for_matrix(const ActivationMatrix &matrix,
                                                           std::span<const std::uint64_t> clustered_ids,
                                                           const ClusterModel &model,
                                                           const GroupMap &group_map);

/// simulation.csv, simulation_summary.csv, breakdown.csv.
std::vector<std::string> emit_simulation_artifacts(const ComparisonTable &table,
                                                   const CostModelParams &cost,
                                                   const std::string &out_dir);

/// classification.csv; failed layers keep their row with accuracy nan.
std::string emit_classification_csv(const ClassificationReport &report,
                                    const std::string &out_dir);

// ---- artifact file round-trips used by the standalone subcommands ----

void write_cluster_report(const ClusterStage &stage, std::ostream &out);

/// request_id -> recommended groups, parsed back from cluster_report.csv.
std::map<std::uint64_t, std::vector<std::uint32_t>> parse_cluster_report(std::istream &in);

} // namespace moeplace
