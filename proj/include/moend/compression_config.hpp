// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <string>

namespace moend {

/// Storage precision of a K or V element. 16 means pass-through.
class BitWidth {
public:
    static constexpr std::array<int, 3> kLegal = {16, 8, 4};

    /// Throws ConfigError for anything outside {16, 8, 4}.
    explicit BitWidth(int bits);

    int bits() const { return bits_; }
    bool is_passthrough() const { return bits_ == 16; }
    /// Number of quantization steps, 2^bits - 1.
    std::uint32_t levels() const { return (1u << bits_) - 1u; }

    friend auto operator<=>(const BitWidth&, const BitWidth&) = default;

private:
    int bits_;
};

/// Fraction of cached tokens a layer keeps at each eviction round.
/// Stored as an integer percentage so retention counts are computed exactly.
class KeepRatio {
public:
    static constexpr std::array<int, 6> kLegalPercent = {10, 25, 50, 75, 90, 100};

    /// Throws ConfigError unless the value is one of the six legal ratios.
    explicit KeepRatio(double ratio);
    static KeepRatio from_percent(int percent);

    int percent() const { return percent_; }
    double value() const { return percent_ / 100.0; }
    bool is_identity() const { return percent_ == 100; }

    friend auto operator<=>(const KeepRatio&, const KeepRatio&) = default;

private:
    KeepRatio() = default;
    int percent_ = 100;
};

/// One routing choice for one layer: (keep ratio, K bits, V bits).
struct LayerCompressionConfig {
    KeepRatio keep{1.0};
    BitWidth k_bits{16};
    BitWidth v_bits{16};

    static LayerCompressionConfig identity() { return {}; }
    static LayerCompressionConfig make(double keep, int k_bits, int v_bits) {
        return {KeepRatio(keep), BitWidth(k_bits), BitWidth(v_bits)};
    }

    bool is_identity() const {
        return keep.is_identity() && k_bits.is_passthrough() && v_bits.is_passthrough();
    }

    /// Stable textual id, e.g. "keep0.50_k8_v4".
    std::string id() const;

    friend bool operator==(const LayerCompressionConfig&, const LayerCompressionConfig&) = default;
};

}  // namespace moend
