// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moend/compression_config.hpp"
#include "moend/tensor.hpp"

namespace moend::eviction {

enum class ScorerKind {
    kAttnAccum,   ///< accumulated attention weight
    kTrig,        ///< |cos| between pre-RoPE key and recent query direction
    kRandomPerm,  ///< seeded random ranking
};

/// Accepts "attn_accum", "trig" and "random_perm". Throws ConfigError otherwise.
ScorerKind parse_scorer(std::string_view name);
std::string_view scorer_name(ScorerKind kind);

struct ImportanceScores {
    std::vector<double> scores;
    ScorerKind kind = ScorerKind::kAttnAccum;

    std::size_t size() const { return scores.size(); }
};

struct RetainedSet {
    /// Strictly increasing indices into the pre-eviction cache.
    std::vector<std::size_t> indices;
    /// Original absolute positions of the retained tokens; empty when the
    /// caller did not supply positions.
    std::vector<std::int64_t> positions;
};

/// max(1, round_half_up(keep * cache_len)), computed in integer arithmetic.
std::size_t retention_count(KeepRatio keep, std::size_t cache_len);

/// Score of token j = sum over recorded query steps of the weight paid to j.
/// Every row must have one entry per cached token.
ImportanceScores score_attention_accumulation(const std::vector<std::vector<float>>& attention_weights_history);

/// Trigonometric proxy: |cos(mean-over-heads pre-RoPE key_j, query_direction)|.
/// `pre_rope_keys` is [H_kv, T, d_head]; `query_direction` has d_head entries.
/// Zero-norm keys (or a zero query) score 0.
ImportanceScores score_trigonometric(const Tensor& pre_rope_keys, std::span<const float> query_direction);

/// Scores form a permutation of 0..cache_len-1 drawn by Fisher-Yates over
/// std::mt19937_64(seed), swapping index i with draw % (i + 1) for i from the top down.
ImportanceScores score_random_permutation(std::size_t cache_len, std::uint64_t seed);

/// Indices of the `count` highest scores, ties toward the lower index,
/// returned in ascending index order.
std::vector<std::size_t> select_top(std::span<const double> scores, std::size_t count);

/// Retains retention_count(keep, cache_len) tokens. `positions`, if not empty,
/// must have cache_len entries and is filtered alongside the indices.
RetainedSet select_retained(const ImportanceScores& scores, KeepRatio keep, std::size_t cache_len,
                            std::span<const std::int64_t> positions = {});

/// Running attention-accumulation scores for one layer's cache, kept aligned
/// with the cache as tokens are appended and evicted.
class AttentionAccumulator {
public:
    /// Grows to `cache_len` entries, new tokens starting from 0.
    void resize(std::size_t cache_len) { scores_.resize(cache_len, 0.0); }
    /// Adds one query step. `weights` may be shorter than the tracked length
    /// only if the caller resizes first; it must not be longer.
    void add(std::span<const float> weights);
    void retain(std::span<const std::size_t> indices);

    ImportanceScores scores() const { return {scores_, ScorerKind::kAttnAccum}; }
    std::size_t size() const { return scores_.size(); }

private:
    std::vector<double> scores_;
};

}  // namespace moend::eviction
