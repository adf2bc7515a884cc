// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "moend/calibration.hpp"
#include "moend/eviction.hpp"
#include "moend/toy_model.hpp"

namespace moend::cli {

enum ExitCode : int {
    kOk = 0,
    kGenericError = 1,
    kConfigError = 2,
    kInfeasible = 3,
    kIoError = 4,
    kFormatError = 5,
    kInputError = 6,
};

struct RunConfig {
    ModelSpec model;
    std::uint64_t seed = 0;
    std::filesystem::path out = "moend_out";
    std::string space = "full";
    std::vector<std::string> policies = {"1d", "2d_uniform", "2d", "2d_hetero"};
    std::vector<std::uint64_t> budgets = {64, 128, 256, 512};
    calib::Metric metric = calib::Metric::kL2Proxy;
    /// Scorer used when building sensitivity tables.
    eviction::ScorerKind calibration_scorer = eviction::ScorerKind::kRandomPerm;
    /// Scorer used by the decode-time cache.
    eviction::ScorerKind decode_scorer = eviction::ScorerKind::kAttnAccum;
    bool validate_kl = false;
    bool oracle_check = false;
    std::size_t t_cache = 256;
    std::size_t steps = 192;
    std::vector<std::size_t> prompt_lengths = {64};
    std::size_t eviction_period = 128;
    std::size_t heldout_count = 8;
    std::size_t heldout_length = 256;
    std::size_t threads = 1;
    std::filesystem::path table;          // solve: defaults to the metric's table in `out`
    std::vector<std::filesystem::path> plans;  // simulate: defaults to every plan in `out`/plans

    /// Throws ConfigError on an invalid combination.
    void validate() const;
};

/// Merges a JSON run file into `config`; the file may hold any subset of
/// the RunConfig keys and "model_spec" may be inline or a path.
void apply_run_file(const std::filesystem::path& path, RunConfig& config);

int cmd_calibrate(const RunConfig& config, std::ostream& log);
int cmd_solve(const RunConfig& config, std::ostream& log);
int cmd_simulate(const RunConfig& config, std::ostream& log);
int cmd_report(const RunConfig& config, std::ostream& log);

/// Parses argv, dispatches, and maps errors to exit codes.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace moend::cli
