// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace moend {

/// Dense row-major float32 tensor. Plain value type; no views or strides.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> dims, float fill = 0.0f);
    Tensor(std::vector<std::size_t> dims, std::vector<float> values);

    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t axis) const { return shape.at(axis); }
    std::size_t numel() const { return data.size(); }

    float& operator[](std::size_t i) { return data[i]; }
    float operator[](std::size_t i) const { return data[i]; }

    /// Row-major element access for rank-2 and rank-3 tensors.
    float& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    const float& at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
    float& at(std::size_t i, std::size_t j, std::size_t k) {
        return data[(i * shape[1] + j) * shape[2] + k];
    }
    const float& at(std::size_t i, std::size_t j, std::size_t k) const {
        return data[(i * shape[1] + j) * shape[2] + k];
    }

    /// Contiguous slice along the leading axis.
    std::span<float> row(std::size_t i);
    std::span<const float> row(std::size_t i) const;

    bool all_finite() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);

}  // namespace moend
