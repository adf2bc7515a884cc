// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "moend/compression_config.hpp"
#include "moend/tensor.hpp"
#include "moend/toy_model.hpp"

namespace moend::testing {

inline Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    Tensor t(std::move(shape));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(lo, hi);
    for (float& x : t.data) x = dist(rng);
    return t;
}

inline double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

// Worst per-unit excess of |x - deq| over the analytic bound, with units
// computed here from the raw tensor: (h, j) channels split into token runs of
// `span`. Float slack covers the float32 storage of scale and result.
inline double worst_excess(const Tensor& x, const Tensor& y, BitWidth bits, std::size_t span) {
    const std::size_t H = x.dim(0), T = x.dim(1), D = x.dim(2);
    double worst = -1e300;
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t j = 0; j < D; ++j) {
            for (std::size_t t0 = 0; t0 < T; t0 += span) {
                const std::size_t t1 = std::min(T, t0 + span);
                double lo = 1e300, hi = -1e300, amax = 0.0, err = 0.0;
                for (std::size_t t = t0; t < t1; ++t) {
                    lo = std::min<double>(lo, x.at(h, t, j));
                    hi = std::max<double>(hi, x.at(h, t, j));
                    amax = std::max(amax, std::abs(static_cast<double>(x.at(h, t, j))));
                    err = std::max(err, std::abs(static_cast<double>(x.at(h, t, j)) - y.at(h, t, j)));
                }
                const double bound = (hi - lo) / (2.0 * ((1 << bits.bits()) - 1));
                const double slack = 4.0 * FLT_EPSILON * ((hi - lo) + amax);
                worst = std::max(worst, err - bound - slack);
            }
        }
    }
    return worst;
}

inline ModelSpec small_spec(std::size_t layers = 3, std::size_t q_heads = 4, std::size_t kv_heads = 2,
                            std::size_t head_dim = 8, std::size_t vocab = 32, std::uint64_t seed = 5) {
    ModelSpec s;
    s.num_layers = layers;
    s.num_q_heads = q_heads;
    s.num_kv_heads = kv_heads;
    s.head_dim = head_dim;
    s.vocab_size = vocab;
    s.seed = seed;
    return s;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("moend_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

/// Straightforward double-precision forward pass over the model's weights,
/// written without any of the library's kernels. Each query head attends
/// to its own KV head (q_head / group) over positions 0..t.
struct ReferenceOutput {
    std::vector<std::vector<std::vector<double>>> attention;  // [layer][t][hidden]
    std::vector<std::vector<double>> logits;                  // [t][vocab]
};

inline ReferenceOutput reference_forward(const ToyModel& model, const std::vector<TokenId>& tokens) {
    const ModelSpec& s = model.spec();
    const std::size_t T = tokens.size();
    const std::size_t H = s.hidden_dim();
    const std::size_t d = s.head_dim;
    using Vec = std::vector<double>;

    auto norm = [](const Vec& x) {
        double ss = 0.0;
        for (double v : x) ss += v * v;
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-6);
        Vec out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv;
        return out;
    };
    auto matvec = [](const Tensor& w, const Vec& x) {
        Vec out(w.dim(0), 0.0);
        for (std::size_t r = 0; r < w.dim(0); ++r) {
            for (std::size_t c = 0; c < w.dim(1); ++c) out[r] += static_cast<double>(w.at(r, c)) * x[c];
        }
        return out;
    };
    auto rotate = [&](Vec& x, std::size_t offset, std::size_t pos) {
        for (std::size_t i = 0; i < d / 2; ++i) {
            const double angle = static_cast<double>(pos) * std::pow(s.rope_base, -2.0 * double(i) / double(d));
            const double a = x[offset + 2 * i];
            const double b = x[offset + 2 * i + 1];
            x[offset + 2 * i] = a * std::cos(angle) - b * std::sin(angle);
            x[offset + 2 * i + 1] = a * std::sin(angle) + b * std::cos(angle);
        }
    };

    std::vector<Vec> h(T);
    for (std::size_t t = 0; t < T; ++t) {
        const auto row = model.embedding().row(static_cast<std::size_t>(tokens[t]));
        h[t].assign(row.begin(), row.end());
    }
    ReferenceOutput out;
    for (std::size_t l = 0; l < s.num_layers; ++l) {
        const auto& w = model.layer(l);
        std::vector<Vec> q(T), k(T), v(T);
        for (std::size_t t = 0; t < T; ++t) {
            const Vec n = norm(h[t]);
            q[t] = matvec(w.wq, n);
            k[t] = matvec(w.wk, n);
            v[t] = matvec(w.wv, n);
            for (std::size_t hh = 0; hh < s.num_q_heads; ++hh) rotate(q[t], hh * d, t);
            for (std::size_t hh = 0; hh < s.num_kv_heads; ++hh) rotate(k[t], hh * d, t);
        }
        std::vector<Vec> attn(T, Vec(H, 0.0));
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t hh = 0; hh < s.num_q_heads; ++hh) {
                const std::size_t kv = hh / (s.num_q_heads / s.num_kv_heads);
                Vec scores(t + 1);
                double mx = -1e300;
                for (std::size_t j = 0; j <= t; ++j) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < d; ++i) dot += q[t][hh * d + i] * k[j][kv * d + i];
                    scores[j] = dot / std::sqrt(static_cast<double>(d));
                    mx = std::max(mx, scores[j]);
                }
                double z = 0.0;
                for (double& sc : scores) z += (sc = std::exp(sc - mx));
                for (std::size_t j = 0; j <= t; ++j) {
                    for (std::size_t i = 0; i < d; ++i) attn[t][hh * d + i] += scores[j] / z * v[j][kv * d + i];
                }
            }
            const Vec o = matvec(w.wo, attn[t]);
            for (std::size_t i = 0; i < H; ++i) h[t][i] += o[i];
            Vec up = matvec(w.w1, norm(h[t]));
            for (double& x : up) x = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
            const Vec down = matvec(w.w2, up);
            for (std::size_t i = 0; i < H; ++i) h[t][i] += down[i];
        }
        out.attention.push_back(std::move(attn));
    }
    for (std::size_t t = 0; t < T; ++t) out.logits.push_back(matvec(model.unembedding(), norm(h[t])));
    return out;
}

}  // namespace moend::testing
