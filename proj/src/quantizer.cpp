// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#include "moend/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "moend/errors.hpp"

namespace moend::quant {

namespace {

void check_block_shape(const Tensor& t) {
    if (t.rank() != 3) {
        throw ShapeError("KV block must have shape [H_kv, T, d_head]");
    }
    if (!t.all_finite()) {
        throw InputError("KV block contains non-finite values");
    }
}

QuantizedBlock quantize_units(const Tensor& x, BitWidth bits, UnitAxis axis, std::size_t group_size) {
    check_block_shape(x);
    QuantizedBlock block;
    block.shape = x.shape;
    block.bits = bits;
    block.axis = axis;
    block.group_size = group_size;

    if (bits.is_passthrough()) {
        block.passthrough = x.data;
        return block;
    }

    const std::size_t heads = block.heads();
    const std::size_t tokens = block.tokens();
    const std::size_t dim = block.head_dim();
    const std::size_t span = block.unit_span();
    const std::size_t groups = block.groups_per_channel();
    const auto levels = static_cast<double>(bits.levels());

    block.codes.assign(x.numel(), 0);
    block.scales.assign(block.num_units(), 1.0f);
    block.zero_points.assign(block.num_units(), 0.0f);

    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t j = 0; j < dim; ++j) {
            for (std::size_t g = 0; g < groups; ++g) {
                const std::size_t t0 = g * span;
                const std::size_t t1 = std::min(tokens, t0 + span);
                float lo = x.at(h, t0, j);
                float hi = lo;
                for (std::size_t t = t0 + 1; t < t1; ++t) {
                    lo = std::min(lo, x.at(h, t, j));
                    hi = std::max(hi, x.at(h, t, j));
                }
                const std::size_t u = (h * dim + j) * groups + g;
                block.zero_points[u] = lo;
                if (hi == lo) {
                    // zero-range guard: all codes 0, exact reconstruction
                    block.scales[u] = 1.0f;
                    continue;
                }
                const double scale = (static_cast<double>(hi) - lo) / levels;
                block.scales[u] = static_cast<float>(scale);
                for (std::size_t t = t0; t < t1; ++t) {
                    // nearbyint under the default rounding mode is round-half-to-even
                    double q = std::nearbyint((static_cast<double>(x.at(h, t, j)) - lo) / scale);
                    q = std::clamp(q, 0.0, levels);
                    block.codes[(h * tokens + t) * dim + j] = static_cast<std::uint8_t>(q);
                }
            }
        }
    }
    return block;
}

}  // namespace

std::size_t QuantizedBlock::unit_span() const {
    if (axis == UnitAxis::kPerChannel) {
        return std::max<std::size_t>(tokens(), 1);
    }
    return group_size;
}

std::size_t QuantizedBlock::groups_per_channel() const {
    const std::size_t span = unit_span();
    if (span == 0) {
        return 0;
    }
    return std::max<std::size_t>(1, (tokens() + span - 1) / span);
}

std::size_t QuantizedBlock::num_units() const {
    return heads() * head_dim() * groups_per_channel();
}

std::size_t QuantizedBlock::unit_of(std::size_t h, std::size_t t, std::size_t j) const {
    return (h * head_dim() + j) * groups_per_channel() + t / unit_span();
}

QuantizedBlock quantize_k(const Tensor& k, BitWidth bits) {
    return quantize_units(k, bits, UnitAxis::kPerChannel, 0);
}

QuantizedBlock quantize_v(const Tensor& v, BitWidth bits, std::size_t group_size) {
    if (group_size == 0) {
        throw ConfigError("V quantization group_size must be positive");
    }
    return quantize_units(v, bits, UnitAxis::kPerGroup, group_size);
}

Tensor dequantize(const QuantizedBlock& block) {
    if (block.shape.size() != 3) {
        throw FormatError("quantized block shape must be rank 3");
    }
    const std::size_t n = shape_numel(block.shape);
    if (block.bits.is_passthrough()) {
        if (block.passthrough.size() != n) {
            throw FormatError("pass-through payload length does not match block shape");
        }
        return Tensor(block.shape, block.passthrough);
    }
    if (block.axis == UnitAxis::kPerGroup && block.group_size == 0) {
        throw FormatError("per-group block has zero group_size");
    }
    if (block.codes.size() != n) {
        throw FormatError("code payload length does not match block shape");
    }
    const std::size_t units = block.num_units();
    if (block.scales.size() != units || block.zero_points.size() != units) {
        throw FormatError("unit metadata count does not match block layout");
    }
    for (std::size_t u = 0; u < units; ++u) {
        if (!std::isfinite(block.scales[u]) || !(block.scales[u] > 0.0f) ||
            !std::isfinite(block.zero_points[u])) {
            throw FormatError("corrupted scale/zero_point for unit " + std::to_string(u));
        }
    }
    const std::uint32_t levels = block.bits.levels();

    Tensor out(block.shape);
    const std::size_t heads = block.heads();
    const std::size_t tokens = block.tokens();
    const std::size_t dim = block.head_dim();
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < tokens; ++t) {
            for (std::size_t j = 0; j < dim; ++j) {
                const std::size_t idx = (h * tokens + t) * dim + j;
                const std::uint8_t code = block.codes[idx];
                if (code > levels) {
                    throw FormatError("code exceeds bit width");
                }
                const std::size_t u = block.unit_of(h, t, j);
                out.data[idx] = static_cast<float>(static_cast<double>(code) * block.scales[u] +
                                                   static_cast<double>(block.zero_points[u]));
            }
        }
    }
    return out;
}

std::uint64_t stored_bytes(std::size_t tokens, std::size_t kv_heads, std::size_t head_dim, BitWidth bits) {
    return static_cast<std::uint64_t>(tokens) * kv_heads * head_dim * static_cast<std::uint64_t>(bits.bits()) / 8;
}

std::uint64_t stored_bytes(const QuantizedBlock& block) {
    return stored_bytes(block.tokens(), block.heads(), block.head_dim(), block.bits);
}

std::uint64_t metadata_bytes(const QuantizedBlock& block) {
    if (block.bits.is_passthrough()) {
        return 0;
    }
    return static_cast<std::uint64_t>(block.num_units()) * 2 * sizeof(float);
}

QuantizedBlock select_tokens(const QuantizedBlock& block, std::span<const std::size_t> token_indices) {
    const std::size_t tokens = block.tokens();
    for (std::size_t i = 0; i < token_indices.size(); ++i) {
        if (token_indices[i] >= tokens || (i > 0 && token_indices[i] <= token_indices[i - 1])) {
            throw InputError("token indices must be strictly increasing and in range");
        }
    }
    if (!block.bits.is_passthrough() && block.groups_per_channel() > 1) {
        throw InputError("select_tokens needs units spanning the whole token axis");
    }

    QuantizedBlock out = block;
    const std::size_t heads = block.heads();
    const std::size_t dim = block.head_dim();
    const std::size_t kept = token_indices.size();
    out.shape = {heads, kept, dim};
    if (block.axis == UnitAxis::kPerGroup) {
        // still a single group per channel after filtering
        out.group_size = std::max(block.group_size, kept);
    }

    auto gather = [&](const auto& src, auto& dst) {
        dst.resize(heads * kept * dim);
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < kept; ++i) {
                const auto* from = &src[(h * tokens + token_indices[i]) * dim];
                std::copy(from, from + dim, dst.begin() + static_cast<std::ptrdiff_t>((h * kept + i) * dim));
            }
        }
    };
    if (block.bits.is_passthrough()) {
        gather(block.passthrough, out.passthrough);
    } else {
        gather(block.codes, out.codes);
    }
    return out;
}

double error_bound(double range, BitWidth bits) {
    if (bits.is_passthrough()) {
        return 0.0;
    }
    return range / (2.0 * static_cast<double>(bits.levels()));
}

}  // namespace moend::quant
