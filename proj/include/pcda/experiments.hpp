#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pcda/evaluation.hpp"
#include "pcda/training.hpp"

namespace pcda {

/// Creates `dir` and writes config.json. An existing snapshot must match the
/// config exactly, otherwise ConfigError (snapshots are never rewritten).
void prepare_run_dir(const std::filesystem::path& dir, const ExperimentConfig& cfg);

/// Phase-1 run: writes checkpoint.ckpt and train_log.jsonl into `dir`.
TrainResult run_phase1(const ExperimentConfig& cfg, const std::filesystem::path& dir);
TrainResult run_phase2(const ExperimentConfig& cfg, const Checkpoint& init,
                       const std::filesystem::path& dir);

struct MatrixResult {
    Checkpoint phase1;
    std::map<std::string, Checkpoint> adapted;
    MetricsTable table;
    RankingResult ranking;
};

/// Shared phase-1 checkpoint (reused from `run_dir/phase1` when present),
/// then one phase-2 run per method; every model is evaluated on the test
/// splits, ranked, and reported (metrics.tsv, report.md, report.json).
MatrixResult run_matrix(const ExperimentConfig& base, const std::filesystem::path& run_dir,
                        const std::vector<std::string>& methods = {});

} // namespace pcda
