// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "moend/calibration.hpp"
#include "moend/compression_config.hpp"
#include "moend/toy_model.hpp"

namespace moend::solver {

/// Geometry of the cache the budget is spent on.
struct CacheDims {
    std::size_t num_layers = 0;
    std::size_t num_kv_heads = 0;
    std::size_t head_dim = 0;
    /// Tokens per layer held by an uncompressed cache.
    std::size_t t_cache = 0;

    /// 28 layers, 8 KV heads, head_dim 128.
    static CacheDims full_scale(std::size_t t_cache);
    static CacheDims from_spec(const ModelSpec& spec, std::size_t t_cache);

    friend bool operator==(const CacheDims&, const CacheDims&) = default;
};

/// keep * T * H_kv * d_head * (k_bits + v_bits) / 8 bytes.
double memory_cost(const LayerCompressionConfig& config, std::size_t t_cache, std::size_t num_kv_heads,
                   std::size_t head_dim);
double memory_cost(const LayerCompressionConfig& config, const CacheDims& dims);

enum class Policy { kFull, k1d, k2dUniform, k2d, k2dHetero };

/// "full", "1d", "2d_uniform", "2d", "2d_hetero"; ConfigError otherwise.
Policy parse_policy(std::string_view name);
std::string_view policy_name(Policy policy);
/// Token-budget multiplier: 1 for full/1d/2d_uniform, 4 / 1.5 for 2d/2d_hetero.
double budget_scale(Policy policy);

struct MemoryBudget {
    std::uint64_t bytes = 0;
    /// Nominal token budget the byte figure was derived from, if any.
    std::optional<std::uint64_t> tokens;
    double scale = 1.0;
};

/// M = floor(L * b * scale * H_kv * d_head * 4).
MemoryBudget budget_from_tokens(std::uint64_t tokens, Policy policy, const CacheDims& dims);
MemoryBudget budget_from_bytes(std::uint64_t bytes);

/// One selectable option of one layer; `id` is the config column.
struct Candidate {
    std::size_t id = 0;
    double memory = 0.0;
    double sensitivity = 0.0;
};

/// Non-dominated candidates, ascending memory and strictly descending
/// sensitivity. Among exact duplicates the lower id survives.
std::vector<Candidate> pareto_prune(std::span<const Candidate> row);

struct Selection {
    /// Chosen candidate id per layer.
    std::vector<std::size_t> ids;
    double total_memory = 0.0;
    double total_sensitivity = 0.0;
};

/// Sum of chosen memory in layer order; the quantity compared against the budget.
double total_memory(const std::vector<std::vector<Candidate>>& layers, std::span<const std::size_t> ids);

/// Greedy marginal-ratio allocation over per-layer Pareto frontiers, starting
/// from each layer's cheapest point. Throws InfeasibleError if the cheapest
/// points already exceed `budget`.
Selection greedy_select(const std::vector<std::vector<Candidate>>& layers, double budget);

/// Exhaustive minimum of total sensitivity under the budget; ties resolve to
/// the lexicographically smallest id vector. Throws SizeError when there are
/// more than `max_layers` layers or more than `max_points` assignments.
Selection oracle_select(const std::vector<std::vector<Candidate>>& layers, double budget,
                        std::size_t max_layers = 4, double max_points = 1e8);

struct LayerAssignment {
    std::size_t layer = 0;
    LayerCompressionConfig config;
    double m_bytes = 0.0;
    double s_pred = 0.0;
};

struct RoutingPlan {
    Policy policy = Policy::kFull;
    MemoryBudget budget;
    CacheDims dims;
    /// "rule", "greedy" or "oracle".
    std::string solver;
    std::string model_spec_hash;
    std::vector<LayerAssignment> layers;
    double total_memory = 0.0;
    double total_sensitivity = 0.0;

    std::vector<LayerCompressionConfig> configs() const;
};

enum class SolverKind { kGreedy, kOracle };

/// Config columns of `space` a policy may choose from at budget `budget`.
/// full: identity, whatever the budget. 1d: the largest keep whose (keep,16,16) fits uniformly.
/// 2d_uniform: the largest keep whose (keep,8,4) fits uniformly.
/// 2d: every (k,v) at the 2d_uniform keep. 2d_hetero: all columns.
/// Throws InfeasibleError when no uniform keep fits and ConfigError when a
/// required column is missing from the space.
std::vector<std::size_t> apply_policy(const calib::ConfigSpace& space, Policy policy, const MemoryBudget& budget,
                                      const CacheDims& dims);

RoutingPlan solve_greedy(const calib::SensitivityTable& table, const MemoryBudget& budget, Policy policy,
                         const CacheDims& dims);
RoutingPlan solve_oracle(const calib::SensitivityTable& table, const MemoryBudget& budget, Policy policy,
                         const CacheDims& dims, std::size_t max_layers = 4);
RoutingPlan solve(const calib::SensitivityTable& table, const MemoryBudget& budget, Policy policy,
                  const CacheDims& dims, SolverKind kind);

/// Plan with a fixed config on every layer, scored against `table` when the
/// config is one of its columns (otherwise s_pred is 0).
RoutingPlan uniform_plan(const LayerCompressionConfig& config, const CacheDims& dims, Policy policy,
                         const MemoryBudget& budget, const calib::SensitivityTable* table = nullptr);

struct AblationDeltas {
    /// 2d - 2d_uniform.
    double quant = 0.0;
    /// 2d_hetero - 2d.
    double evict = 0.0;
};

/// Throws InputError unless 2d_uniform, 2d and 2d_hetero are all present.
AblationDeltas ablation_deltas(const std::map<Policy, double>& metric_by_policy);

nlohmann::json to_json(const RoutingPlan& plan);
RoutingPlan plan_from_json(const nlohmann::json& j);
void save_plan(const std::filesystem::path& path, const RoutingPlan& plan);
RoutingPlan load_plan(const std::filesystem::path& path);

}  // namespace moend::solver
