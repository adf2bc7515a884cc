// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "moend/compression_config.hpp"
#include "moend/eviction.hpp"
#include "moend/hetero_cache.hpp"
#include "moend/solver.hpp"
#include "moend/toy_model.hpp"

namespace moend::decode {

struct DecodeOptions {
    eviction::ScorerKind scorer = eviction::ScorerKind::kAttnAccum;
    std::uint64_t seed = 0;
    std::size_t eviction_period = kDefaultEvictionPeriod;
    std::size_t v_group_size = quant::kDefaultGroupSize;
    /// Recent queries averaged into the trigonometric scorer's direction.
    std::size_t trig_query_window = 8;
};

/// Greedy dense decode of a prompt: generated tokens and the logits row each
/// token was chosen from.
struct DenseReference {
    std::vector<TokenId> tokens;
    std::vector<std::vector<float>> logits;
};

/// Dense greedy decode, memoized by (model spec, prompt, steps).
std::shared_ptr<const DenseReference> dense_reference(const ToyModel& model, std::span<const TokenId> prompt,
                                                      std::size_t steps);

struct StepRecord {
    std::int64_t position = 0;
    /// Dense greedy token fed to both runs at this step.
    TokenId token = 0;
    /// Greedy choice of the compressed run at this step.
    TokenId compressed_token = 0;
    double kl = 0.0;
    double max_logit_deviation = 0.0;
    std::vector<std::size_t> layer_lengths;
    std::uint64_t payload_bytes = 0;
};

struct EvictionEvent {
    std::int64_t step = 0;
    std::size_t layer = 0;
    std::size_t before = 0;
    std::size_t after = 0;
};

struct DecodeTrace {
    std::size_t prompt_length = 0;
    std::vector<StepRecord> steps;
    std::vector<EvictionEvent> evictions;
    double mean_kl = 0.0;
    double max_logit_deviation = 0.0;
    /// Index of the first step whose compressed greedy token differs from
    /// the dense one; equals steps.size() when they never differ.
    std::size_t first_divergence = 0;
    /// Payload after the final token has been appended and any due eviction run.
    std::uint64_t final_payload_bytes = 0;
    std::uint64_t peak_payload_bytes = 0;
    std::vector<std::size_t> final_layer_lengths;

    std::vector<TokenId> dense_tokens() const;
    std::vector<TokenId> compressed_tokens() const;
};

/// Greedy decode of `steps` tokens through a HeteroKVCache with one config
/// per layer, teacher-forced on the dense token stream so per-step
/// divergence is measured against the dense reference. The prompt is
/// prefilled token by token without eviction; the last generated token is
/// appended as well, so the cache ends up holding prompt + steps tokens.
DecodeTrace decode(const ToyModel& model, std::span<const TokenId> prompt,
                   const std::vector<LayerCompressionConfig>& configs, std::size_t steps,
                   const DecodeOptions& options = {});
/// Throws ConfigError if the plan does not match the model's geometry.
DecodeTrace decode(const ToyModel& model, std::span<const TokenId> prompt, const solver::RoutingPlan& plan,
                   std::size_t steps, const DecodeOptions& options = {});

nlohmann::json to_json(const DecodeTrace& trace);

struct ReportRow {
    std::string policy;
    std::optional<std::uint64_t> b;
    std::uint64_t m_bytes = 0;
    double predicted_bytes = 0.0;
    std::uint64_t realized_bytes = 0;
    std::uint64_t peak_bytes = 0;
    double mean_kl = 0.0;
    double max_logit_deviation = 0.0;
    std::size_t first_divergence = 0;
    std::size_t steps = 0;
};

struct PlanRun {
    solver::RoutingPlan plan;
    DecodeTrace trace;
};

/// One row per run, ordered by nominal budget then policy.
std::vector<ReportRow> memory_report(const std::vector<PlanRun>& runs);

nlohmann::json to_json(const std::vector<ReportRow>& rows);
/// Columns: policy, b, M_bytes, realized_bytes, mean_kl, first_divergence, steps.
std::string report_csv(const std::vector<ReportRow>& rows);

}  // namespace moend::decode
