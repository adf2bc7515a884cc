// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#include "moend/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "moend/errors.hpp"

namespace moend {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(std::vector<std::size_t> dims, float fill)
    : shape(std::move(dims)), data(shape_numel(shape), fill) {}

Tensor::Tensor(std::vector<std::size_t> dims, std::vector<float> values)
    : shape(std::move(dims)), data(std::move(values)) {
    if (data.size() != shape_numel(shape)) {
        throw ShapeError("tensor data length does not match shape");
    }
}

std::span<float> Tensor::row(std::size_t i) {
    const std::size_t stride = shape.empty() ? 0 : data.size() / shape[0];
    return {data.data() + i * stride, stride};
}

std::span<const float> Tensor::row(std::size_t i) const {
    const std::size_t stride = shape.empty() ? 0 : data.size() / shape[0];
    return {data.data() + i * stride, stride};
}

bool Tensor::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](float x) { return std::isfinite(x); });
}

}  // namespace moend
