// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "moend/compression_config.hpp"
#include "moend/eviction.hpp"
#include "moend/quantizer.hpp"
#include "moend/tensor.hpp"
#include "moend/toy_model.hpp"

namespace moend {

inline constexpr std::size_t kDefaultEvictionPeriod = 128;

/// One layer's compressed KV store.
///
/// Tokens are held in chunks of up to `v_group_size` tokens. The newest chunk
/// stays open and is re-quantized from its full-precision inputs on every
/// append; once full it is sealed and only its codes are kept. Each chunk
/// has one K unit and one V unit per (head, head-dim) channel, so eviction
/// drops token columns without re-quantizing.
class LayerCacheState {
public:
    std::size_t length() const { return positions_.size(); }
    std::size_t layer_index() const { return layer_; }
    /// Original absolute positions, strictly increasing.
    const std::vector<std::int64_t>& positions() const { return positions_; }

    /// Dequantized keys (post-RoPE) and values, [H_kv, T, d_head].
    Tensor keys() const;
    Tensor values() const;

    /// Code payload per the memory model: stored_bytes(K) + stored_bytes(V).
    std::uint64_t payload_bytes() const;
    std::uint64_t metadata_bytes() const;

private:
    friend class HeteroKVCache;

    struct Chunk {
        quant::QuantizedBlock k;
        quant::QuantizedBlock v;
        Tensor raw_k;  // [H_kv, n, d] while open, empty once sealed
        Tensor raw_v;
        bool sealed = false;
        std::size_t length() const { return k.tokens(); }
    };

    void refresh_mirror(std::size_t first_token, const Chunk& chunk);

    std::size_t layer_ = 0;
    std::size_t kv_heads_ = 0;
    std::size_t head_dim_ = 0;
    std::vector<Chunk> chunks_;
    std::vector<std::int64_t> positions_;
    // dequantized rows per kv head, T * d floats each
    std::vector<std::vector<float>> key_rows_;
    std::vector<std::vector<float>> value_rows_;
};

/// Per-layer heterogeneous KV cache executing a routing plan during decode.
///
/// Protocol per token: append(layer, ...) and attend(layer, ...) for every
/// layer at position == step(), then advance(); when eviction_due(), call
/// maybe_evict for each layer.
class HeteroKVCache {
public:
    HeteroKVCache(const ModelSpec& spec, std::vector<LayerCompressionConfig> configs,
                  std::size_t eviction_period = kDefaultEvictionPeriod,
                  std::size_t v_group_size = quant::kDefaultGroupSize);

    std::size_t num_layers() const { return layers_.size(); }
    const LayerCacheState& layer(std::size_t index) const { return layers_.at(index); }
    const LayerCompressionConfig& config(std::size_t index) const { return configs_.at(index); }
    std::size_t eviction_period() const { return period_; }

    /// Number of tokens appended so far; the next append position.
    std::int64_t step() const { return step_; }
    void advance() { ++step_; }
    bool eviction_due() const { return step_ > 0 && step_ % static_cast<std::int64_t>(period_) == 0; }

    /// Appends one token's K (already rotated at `position`) and V, each
    /// [H_kv * d_head]. Throws ProtocolError unless position == step() and
    /// position exceeds every cached position of the layer.
    void append(std::size_t layer, std::span<const float> k_new, std::span<const float> v_new, std::int64_t position);

    /// No-op unless eviction_due(). On a trigger step keeps the
    /// min(T_l, retention_count(keep, step())) best-scored tokens; layers with
    /// keep 1.0 never shrink. Returns the retained set when tokens were dropped.
    std::optional<eviction::RetainedSet> maybe_evict(std::size_t layer, const eviction::ImportanceScores& scores);

    /// Attention of an unrotated query [num_q_heads * d_head] at
    /// `query_position` over the layer's cache. Returns [num_q_heads, d_head].
    /// If `token_weights` is given it receives the attention weights per
    /// cached token summed over query heads.
    Tensor attend(std::size_t layer, std::span<const float> query, std::int64_t query_position,
                  std::vector<float>* token_weights = nullptr) const;

    std::uint64_t payload_bytes() const;

    /// Diagnostic snapshot: step, period, and per-layer config, length,
    /// positions and byte counts.
    nlohmann::json snapshot() const;

private:
    ModelSpec spec_;
    std::vector<LayerCompressionConfig> configs_;
    std::vector<LayerCacheState> layers_;
    std::size_t period_;
    std::size_t v_group_size_;
    std::int64_t step_ = 0;
};

}  // namespace moend
