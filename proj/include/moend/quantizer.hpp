// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "moend/compression_config.hpp"
#include "moend/tensor.hpp"

namespace moend::quant {

/// Default V group length along the token axis.
inline constexpr std::size_t kDefaultGroupSize = 32;

enum class UnitAxis {
    /// One unit per (head, head-dim) channel spanning every token.
    kPerChannel,
    /// One unit per `group_size` contiguous tokens within each channel.
    kPerGroup,
};

/// Asymmetrically quantized [H_kv, T, d_head] block.
///
/// Unit u covers channel c = h * d_head + j over tokens
/// [g * span, min((g + 1) * span, T)), where u = c * groups + g and span is
/// T for per-channel blocks and group_size for per-group blocks.
/// Element value = code * scale[u] + zero_point[u]. 16-bit blocks keep the
/// input verbatim in `passthrough` and carry no codes or unit metadata.
struct QuantizedBlock {
    std::vector<std::size_t> shape;  // {H_kv, T, d_head}
    BitWidth bits{16};
    UnitAxis axis = UnitAxis::kPerChannel;
    std::size_t group_size = 0;      // meaningful for kPerGroup only

    std::vector<std::uint8_t> codes;
    std::vector<float> scales;
    std::vector<float> zero_points;
    std::vector<float> passthrough;

    std::size_t heads() const { return shape.at(0); }
    std::size_t tokens() const { return shape.at(1); }
    std::size_t head_dim() const { return shape.at(2); }

    /// Tokens covered by one unit along the token axis.
    std::size_t unit_span() const;
    std::size_t groups_per_channel() const;
    std::size_t num_units() const;
    /// Unit index that owns element (h, t, j).
    std::size_t unit_of(std::size_t h, std::size_t t, std::size_t j) const;
};

/// K codec: per-channel asymmetric quantization.
QuantizedBlock quantize_k(const Tensor& k, BitWidth bits);

/// V codec: asymmetric group quantization along the token axis. The last
/// group of a channel may be short. Throws ConfigError for group_size == 0.
QuantizedBlock quantize_v(const Tensor& v, BitWidth bits, std::size_t group_size = kDefaultGroupSize);

/// Throws FormatError if the block's unit metadata or codes are inconsistent.
Tensor dequantize(const QuantizedBlock& block);

/// Code payload in bytes: tokens * H_kv * d_head * bits / 8. Excludes metadata.
std::uint64_t stored_bytes(const QuantizedBlock& block);
std::uint64_t stored_bytes(std::size_t tokens, std::size_t kv_heads, std::size_t head_dim, BitWidth bits);

/// Scale + zero point storage (two float32 per unit); zero for 16-bit blocks.
std::uint64_t metadata_bytes(const QuantizedBlock& block);

/// Keeps only the given token indices (strictly increasing). Unit metadata is
/// carried over unchanged, so only blocks whose units span the whole token
/// axis (one unit per channel) can be filtered.
QuantizedBlock select_tokens(const QuantizedBlock& block, std::span<const std::size_t> token_indices);

/// Worst-case round-trip error for a unit with value range `range`:
/// range / (2 * (2^bits - 1)). Zero for 16-bit.
double error_bound(double range, BitWidth bits);

}  // namespace moend::quant
