// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#include "moend/compression_config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "moend/errors.hpp"

namespace moend {

BitWidth::BitWidth(int bits) : bits_(bits) {
    if (std::find(kLegal.begin(), kLegal.end(), bits) == kLegal.end()) {
        throw ConfigError("bit width must be one of {16, 8, 4}, got " + std::to_string(bits));
    }
}

KeepRatio::KeepRatio(double ratio) {
    for (int p : kLegalPercent) {
        if (std::abs(ratio * 100.0 - p) < 1e-6) {
            percent_ = p;
            return;
        }
    }
    throw ConfigError("keep ratio must be one of {0.1, 0.25, 0.5, 0.75, 0.9, 1.0}, got " +
                      std::to_string(ratio));
}

KeepRatio KeepRatio::from_percent(int percent) {
    if (std::find(kLegalPercent.begin(), kLegalPercent.end(), percent) == kLegalPercent.end()) {
        throw ConfigError("keep percentage must be one of {10, 25, 50, 75, 90, 100}, got " +
                          std::to_string(percent));
    }
    KeepRatio k;
    k.percent_ = percent;
    return k;
}

std::string LayerCompressionConfig::id() const {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "keep%.2f_k%d_v%d", keep.value(), k_bits.bits(), v_bits.bits());
    return buf;
}

}  // namespace moend
