// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#include "moend/hetero_cache.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

#include "moend/errors.hpp"

namespace moend {

namespace {

/// Appends one [H * d] token as a new column of an [H, n, d] tensor.
Tensor append_token(const Tensor& block, std::span<const float> token, std::size_t heads, std::size_t dim) {
    const std::size_t n = block.numel() == 0 ? 0 : block.dim(1);
    Tensor out({heads, n + 1, dim});
    for (std::size_t h = 0; h < heads; ++h) {
        if (n > 0) {
            std::copy_n(&block.at(h, 0, 0), n * dim, &out.at(h, 0, 0));
        }
        std::copy_n(token.data() + h * dim, dim, &out.at(h, n, 0));
    }
    return out;
}

Tensor select_columns(const Tensor& block, std::span<const std::size_t> keep) {
    const std::size_t heads = block.dim(0);
    const std::size_t dim = block.dim(2);
    Tensor out({heads, keep.size(), dim});
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < keep.size(); ++i) {
            std::copy_n(&block.at(h, keep[i], 0), dim, &out.at(h, i, 0));
        }
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// LayerCacheState

Tensor LayerCacheState::keys() const {
    Tensor out({kv_heads_, length(), head_dim_});
    for (std::size_t h = 0; h < kv_heads_; ++h) {
        std::copy(key_rows_[h].begin(), key_rows_[h].end(), out.row(h).begin());
    }
    return out;
}

Tensor LayerCacheState::values() const {
    Tensor out({kv_heads_, length(), head_dim_});
    for (std::size_t h = 0; h < kv_heads_; ++h) {
        std::copy(value_rows_[h].begin(), value_rows_[h].end(), out.row(h).begin());
    }
    return out;
}

std::uint64_t LayerCacheState::payload_bytes() const {
    std::uint64_t total = 0;
    for (const auto& c : chunks_) total += quant::stored_bytes(c.k) + quant::stored_bytes(c.v);
    return total;
}

std::uint64_t LayerCacheState::metadata_bytes() const {
    std::uint64_t total = 0;
    for (const auto& c : chunks_) total += quant::metadata_bytes(c.k) + quant::metadata_bytes(c.v);
    return total;
}

void LayerCacheState::refresh_mirror(std::size_t first_token, const Chunk& chunk) {
    const Tensor k = quant::dequantize(chunk.k);
    const Tensor v = quant::dequantize(chunk.v);
    const std::size_t n = chunk.length();
    for (std::size_t h = 0; h < kv_heads_; ++h) {
        key_rows_[h].resize((first_token + n) * head_dim_);
        value_rows_[h].resize((first_token + n) * head_dim_);
        std::copy_n(&k.at(h, 0, 0), n * head_dim_, key_rows_[h].begin() + static_cast<std::ptrdiff_t>(first_token * head_dim_));
        std::copy_n(&v.at(h, 0, 0), n * head_dim_, value_rows_[h].begin() + static_cast<std::ptrdiff_t>(first_token * head_dim_));
    }
}

// ---------------------------------------------------------------------------
// HeteroKVCache

HeteroKVCache::HeteroKVCache(const ModelSpec& spec, std::vector<LayerCompressionConfig> configs,
                             std::size_t eviction_period, std::size_t v_group_size)
    : spec_(spec), configs_(std::move(configs)), period_(eviction_period), v_group_size_(v_group_size) {
    spec_.validate();
    if (configs_.size() != spec_.num_layers) {
        throw ConfigError("routing has " + std::to_string(configs_.size()) + " layers, model has " +
                          std::to_string(spec_.num_layers));
    }
    if (period_ == 0) {
        throw ConfigError("eviction period must be positive");
    }
    if (v_group_size_ == 0) {
        throw ConfigError("V group size must be positive");
    }
    layers_.resize(spec_.num_layers);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        layers_[l].layer_ = l;
        layers_[l].kv_heads_ = spec_.num_kv_heads;
        layers_[l].head_dim_ = spec_.head_dim;
        layers_[l].key_rows_.resize(spec_.num_kv_heads);
        layers_[l].value_rows_.resize(spec_.num_kv_heads);
    }
}

void HeteroKVCache::append(std::size_t layer, std::span<const float> k_new, std::span<const float> v_new,
                           std::int64_t position) {
    auto& state = layers_.at(layer);
    const std::size_t heads = spec_.num_kv_heads;
    const std::size_t dim = spec_.head_dim;
    if (k_new.size() != heads * dim || v_new.size() != heads * dim) {
        throw ShapeError("appended K/V must have num_kv_heads * head_dim entries");
    }
    if (position != step_) {
        throw ProtocolError("append at position " + std::to_string(position) + " but cache step is " +
                            std::to_string(step_));
    }
    if (!state.positions_.empty() && position <= state.positions_.back()) {
        throw ProtocolError("append position must exceed every cached position");
    }

    if (state.chunks_.empty() || state.chunks_.back().sealed) {
        state.chunks_.emplace_back();
    }
    auto& chunk = state.chunks_.back();
    const std::size_t first = state.length() - (chunk.raw_k.numel() == 0 ? 0 : chunk.raw_k.dim(1));
    chunk.raw_k = append_token(chunk.raw_k, k_new, heads, dim);
    chunk.raw_v = append_token(chunk.raw_v, v_new, heads, dim);
    const auto& cfg = configs_[layer];
    chunk.k = quant::quantize_k(chunk.raw_k, cfg.k_bits);
    chunk.v = quant::quantize_v(chunk.raw_v, cfg.v_bits, v_group_size_);
    state.positions_.push_back(position);
    state.refresh_mirror(first, chunk);
    if (chunk.length() >= v_group_size_) {
        chunk.sealed = true;
        chunk.raw_k = Tensor();
        chunk.raw_v = Tensor();
    }
}

std::optional<eviction::RetainedSet> HeteroKVCache::maybe_evict(std::size_t layer,
                                                                const eviction::ImportanceScores& scores) {
    auto& state = layers_.at(layer);
    if (scores.size() != state.length()) {
        throw InputError("score count " + std::to_string(scores.size()) + " does not match layer length " +
                         std::to_string(state.length()));
    }
    const auto& cfg = configs_[layer];
    if (!eviction_due() || cfg.keep.is_identity() || state.length() == 0) {
        return std::nullopt;
    }
    const std::size_t target =
        std::min(state.length(), eviction::retention_count(cfg.keep, static_cast<std::size_t>(step_)));
    if (target == state.length()) {
        return std::nullopt;
    }

    eviction::RetainedSet kept;
    kept.indices = eviction::select_top(scores.scores, target);
    kept.positions.reserve(target);
    for (std::size_t i : kept.indices) kept.positions.push_back(state.positions_[i]);

    std::vector<LayerCacheState::Chunk> chunks;
    std::size_t offset = 0;
    auto it = kept.indices.begin();
    for (auto& chunk : state.chunks_) {
        const std::size_t n = chunk.length();
        std::vector<std::size_t> local;
        while (it != kept.indices.end() && *it < offset + n) {
            local.push_back(*it - offset);
            ++it;
        }
        offset += n;
        if (local.empty()) {
            continue;
        }
        chunk.k = quant::select_tokens(chunk.k, local);
        chunk.v = quant::select_tokens(chunk.v, local);
        if (!chunk.sealed) {
            chunk.raw_k = select_columns(chunk.raw_k, local);
            chunk.raw_v = select_columns(chunk.raw_v, local);
        }
        chunks.push_back(std::move(chunk));
    }
    state.chunks_ = std::move(chunks);
    state.positions_ = kept.positions;

    const std::size_t dim = spec_.head_dim;
    for (std::size_t h = 0; h < spec_.num_kv_heads; ++h) {
        std::vector<float> keys(target * dim);
        std::vector<float> values(target * dim);
        for (std::size_t i = 0; i < target; ++i) {
            const std::size_t src = kept.indices[i] * dim;
            std::copy_n(state.key_rows_[h].begin() + static_cast<std::ptrdiff_t>(src), dim, keys.begin() + static_cast<std::ptrdiff_t>(i * dim));
            std::copy_n(state.value_rows_[h].begin() + static_cast<std::ptrdiff_t>(src), dim, values.begin() + static_cast<std::ptrdiff_t>(i * dim));
        }
        state.key_rows_[h] = std::move(keys);
        state.value_rows_[h] = std::move(values);
    }
    return kept;
}

Tensor HeteroKVCache::attend(std::size_t layer, std::span<const float> query, std::int64_t query_position,
                             std::vector<float>* token_weights) const {
    const auto& state = layers_.at(layer);
    const std::size_t nq = spec_.num_q_heads;
    const std::size_t dim = spec_.head_dim;
    if (state.length() == 0) {
        throw StateError("attend on empty cache for layer " + std::to_string(layer));
    }
    if (query.size() != nq * dim) {
        throw ShapeError("query must have num_q_heads * head_dim entries");
    }
    if (state.positions_.back() > query_position) {
        throw ProtocolError("cache holds positions after the query position");
    }
    const std::size_t count = state.length();
    Tensor out({nq, dim});
    std::vector<float> weights(count);
    if (token_weights != nullptr) {
        token_weights->assign(count, 0.0f);
    }
    for (std::size_t h = 0; h < nq; ++h) {
        const std::size_t kv = h / spec_.group_size();
        const std::vector<float> q = rope_rotate(query.subspan(h * dim, dim), query_position, spec_.rope_base);
        attention_head(q, state.key_rows_[kv], state.value_rows_[kv], count, dim, out.row(h), weights);
        if (token_weights != nullptr) {
            for (std::size_t j = 0; j < count; ++j) (*token_weights)[j] += weights[j];
        }
    }
    return out;
}

std::uint64_t HeteroKVCache::payload_bytes() const {
    std::uint64_t total = 0;
    for (const auto& l : layers_) total += l.payload_bytes();
    return total;
}

nlohmann::json HeteroKVCache::snapshot() const {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& s = layers_[l];
        layers.push_back({{"layer", l},
                          {"keep", configs_[l].keep.value()},
                          {"k_bits", configs_[l].k_bits.bits()},
                          {"v_bits", configs_[l].v_bits.bits()},
                          {"length", s.length()},
                          {"positions", s.positions()},
                          {"payload_bytes", s.payload_bytes()},
                          {"metadata_bytes", s.metadata_bytes()}});
    }
    return {{"format_version", 1},
            {"step", step_},
            {"eviction_period", period_},
            {"total_payload_bytes", payload_bytes()},
            {"layers", std::move(layers)}};
}

}  // namespace moend
