// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#include "moend/eviction.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "moend/errors.hpp"

namespace moend::eviction {

ScorerKind parse_scorer(std::string_view name) {
    if (name == "attn_accum") return ScorerKind::kAttnAccum;
    if (name == "trig") return ScorerKind::kTrig;
    if (name == "random_perm") return ScorerKind::kRandomPerm;
    throw ConfigError("unknown scorer '" + std::string(name) + "' (expected attn_accum|trig|random_perm)");
}

std::string_view scorer_name(ScorerKind kind) {
    switch (kind) {
        case ScorerKind::kAttnAccum: return "attn_accum";
        case ScorerKind::kTrig: return "trig";
        case ScorerKind::kRandomPerm: return "random_perm";
    }
    return "unknown";
}

std::size_t retention_count(KeepRatio keep, std::size_t cache_len) {
    const std::size_t n = (static_cast<std::size_t>(keep.percent()) * cache_len + 50) / 100;
    return std::max<std::size_t>(1, n);
}

ImportanceScores score_attention_accumulation(const std::vector<std::vector<float>>& history) {
    if (history.empty()) {
        throw InputError("attention history is empty");
    }
    const std::size_t len = history.front().size();
    ImportanceScores out{std::vector<double>(len, 0.0), ScorerKind::kAttnAccum};
    for (const auto& row : history) {
        if (row.size() != len) {
            throw InputError("attention history rows must cover every cached position");
        }
        for (std::size_t j = 0; j < len; ++j) {
            out.scores[j] += row[j];
        }
    }
    return out;
}

ImportanceScores score_trigonometric(const Tensor& pre_rope_keys, std::span<const float> query_direction) {
    if (pre_rope_keys.rank() != 3) {
        throw ShapeError("pre-RoPE keys must be [H_kv, T, d_head]");
    }
    const std::size_t heads = pre_rope_keys.dim(0);
    const std::size_t tokens = pre_rope_keys.dim(1);
    const std::size_t dim = pre_rope_keys.dim(2);
    if (query_direction.size() != dim) {
        throw ShapeError("query direction length must equal d_head");
    }
    double q_norm = 0.0;
    for (float q : query_direction) q_norm += static_cast<double>(q) * q;
    q_norm = std::sqrt(q_norm);

    ImportanceScores out{std::vector<double>(tokens, 0.0), ScorerKind::kTrig};
    if (q_norm == 0.0) {
        return out;
    }
    std::vector<double> key(dim);
    for (std::size_t t = 0; t < tokens; ++t) {
        std::fill(key.begin(), key.end(), 0.0);
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t j = 0; j < dim; ++j) key[j] += pre_rope_keys.at(h, t, j);
        }
        double dot = 0.0;
        double k_norm = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            dot += key[j] * query_direction[j];
            k_norm += key[j] * key[j];
        }
        k_norm = std::sqrt(k_norm);
        if (k_norm > 0.0) {
            out.scores[t] = std::min(1.0, std::abs(dot) / (k_norm * q_norm));
        }
    }
    return out;
}

ImportanceScores score_random_permutation(std::size_t cache_len, std::uint64_t seed) {
    ImportanceScores out{std::vector<double>(cache_len), ScorerKind::kRandomPerm};
    std::vector<std::size_t> perm(cache_len);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    for (std::size_t i = cache_len; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(perm[i - 1], perm[j]);
    }
    for (std::size_t i = 0; i < cache_len; ++i) {
        out.scores[i] = static_cast<double>(perm[i]);
    }
    return out;
}

std::vector<std::size_t> select_top(std::span<const double> scores, std::size_t count) {
    count = std::min(count, scores.size());
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (scores[a] != scores[b]) return scores[a] > scores[b];
                          return a < b;
                      });
    order.resize(count);
    std::sort(order.begin(), order.end());
    return order;
}

RetainedSet select_retained(const ImportanceScores& scores, KeepRatio keep, std::size_t cache_len,
                            std::span<const std::int64_t> positions) {
    if (scores.size() != cache_len) {
        throw InputError("score count does not match cache length");
    }
    if (!positions.empty() && positions.size() != cache_len) {
        throw InputError("position count does not match cache length");
    }
    RetainedSet out;
    if (cache_len == 0) {
        return out;
    }
    out.indices = select_top(scores.scores, retention_count(keep, cache_len));
    if (!positions.empty()) {
        out.positions.reserve(out.indices.size());
        for (std::size_t i : out.indices) out.positions.push_back(positions[i]);
    }
    return out;
}

void AttentionAccumulator::add(std::span<const float> weights) {
    if (weights.size() > scores_.size()) {
        throw InputError("attention row longer than tracked cache");
    }
    for (std::size_t j = 0; j < weights.size(); ++j) {
        scores_[j] += weights[j];
    }
}

void AttentionAccumulator::retain(std::span<const std::size_t> indices) {
    std::vector<double> kept;
    kept.reserve(indices.size());
    for (std::size_t i : indices) {
        if (i >= scores_.size()) {
            throw InputError("retained index out of range");
        }
        kept.push_back(scores_[i]);
    }
    scores_ = std::move(kept);
}

}  // namespace moend::eviction
