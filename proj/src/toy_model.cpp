// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#include "moend/toy_model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <cstdio>
#include <random>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "moend/errors.hpp"

namespace moend {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXf>;
using VectorMap = Eigen::Map<Eigen::VectorXf>;

constexpr float kNormEps = 1e-6f;

ConstMatrixMap as_matrix(const Tensor& t) {
    return {t.data.data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1))};
}

MatrixMap as_matrix(Tensor& t) {
    return {t.data.data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1))};
}

Tensor draw_uniform(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double fan_in) {
    Tensor w({rows, cols});
    const double bound = 1.0 / std::sqrt(fan_in);
    for (float& x : w.data) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        x = static_cast<float>((2.0 * u - 1.0) * bound);
    }
    return w;
}

void rms_norm(std::span<const float> in, std::span<float> out) {
    double ss = 0.0;
    for (float x : in) ss += static_cast<double>(x) * x;
    const auto inv = static_cast<float>(1.0 / std::sqrt(ss / static_cast<double>(in.size()) + kNormEps));
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * inv;
}

Tensor rms_norm_rows(const Tensor& x) {
    Tensor out(x.shape);
    for (std::size_t t = 0; t < x.dim(0); ++t) rms_norm(x.row(t), out.row(t));
    return out;
}

float gelu(float x) {
    constexpr float kC = 0.7978845608028654f;  // sqrt(2 / pi)
    return 0.5f * x * (1.0f + std::tanh(kC * (x + 0.044715f * x * x * x)));
}

/// out = x * W^T for x [T, in], W [out, in].
Tensor linear(const Tensor& x, const Tensor& w) {
    Tensor out({x.dim(0), w.dim(0)});
    as_matrix(out).noalias() = as_matrix(x) * as_matrix(w).transpose();
    return out;
}

void rope_in_place(std::span<float> x, std::int64_t position, double base, bool inverse) {
    const std::size_t d = x.size();
    for (std::size_t i = 0; i < d / 2; ++i) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
        const double angle = static_cast<double>(position) * freq * (inverse ? -1.0 : 1.0);
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double a = x[2 * i];
        const double b = x[2 * i + 1];
        x[2 * i] = static_cast<float>(a * c - b * s);
        x[2 * i + 1] = static_cast<float>(a * s + b * c);
    }
}

void rope_heads(std::span<float> packed, std::size_t heads, std::size_t dim, std::int64_t position, double base) {
    for (std::size_t h = 0; h < heads; ++h) {
        rope_in_place(packed.subspan(h * dim, dim), position, base, false);
    }
}

/// [T, H * d] packed rows -> [H, T, d].
Tensor to_head_major(const Tensor& packed, std::size_t heads, std::size_t dim) {
    const std::size_t tokens = packed.dim(0);
    Tensor out({heads, tokens, dim});
    for (std::size_t t = 0; t < tokens; ++t) {
        for (std::size_t h = 0; h < heads; ++h) {
            std::copy_n(packed.row(t).data() + h * dim, dim, &out.at(h, t, 0));
        }
    }
    return out;
}

struct LayerPass {
    Tensor attention;  // [T, hidden]
    Tensor output;     // hidden state after the block
};

}  // namespace

// ---------------------------------------------------------------------------
// ModelSpec

void ModelSpec::validate() const {
    if (num_layers == 0 || num_q_heads == 0 || num_kv_heads == 0 || head_dim == 0 || vocab_size == 0) {
        throw ConfigError("model spec sizes must be positive");
    }
    if (num_q_heads % num_kv_heads != 0) {
        throw ConfigError("num_q_heads (" + std::to_string(num_q_heads) + ") must be a multiple of num_kv_heads (" +
                          std::to_string(num_kv_heads) + ")");
    }
    if (head_dim % 2 != 0) {
        throw ConfigError("head_dim must be even for rotary embeddings");
    }
    if (!(rope_base > 0.0) || !std::isfinite(rope_base)) {
        throw ConfigError("rope_base must be a positive real");
    }
}

std::string ModelSpec::hash() const {
    const std::string canonical = nlohmann::json(*this).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : canonical) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void to_json(nlohmann::json& j, const ModelSpec& spec) {
    j = nlohmann::json{{"num_layers", spec.num_layers},   {"num_q_heads", spec.num_q_heads},
                       {"num_kv_heads", spec.num_kv_heads}, {"head_dim", spec.head_dim},
                       {"vocab_size", spec.vocab_size},     {"rope_base", spec.rope_base},
                       {"seed", spec.seed}};
}

void from_json(const nlohmann::json& j, ModelSpec& spec) {
    ModelSpec out;
    try {
        out.num_layers = j.value("num_layers", out.num_layers);
        out.num_q_heads = j.value("num_q_heads", out.num_q_heads);
        out.num_kv_heads = j.value("num_kv_heads", out.num_kv_heads);
        out.head_dim = j.value("head_dim", out.head_dim);
        out.vocab_size = j.value("vocab_size", out.vocab_size);
        out.rope_base = j.value("rope_base", out.rope_base);
        out.seed = j.value("seed", out.seed);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed model spec: ") + e.what());
    }
    if (j.contains("hidden_dim") && j.at("hidden_dim").get<std::size_t>() != out.hidden_dim()) {
        throw ConfigError("hidden_dim must equal num_q_heads * head_dim");
    }
    out.validate();
    spec = out;
}

// ---------------------------------------------------------------------------
// RoPE

std::vector<float> rope_rotate(std::span<const float> x, std::int64_t position, double base) {
    if (x.size() % 2 != 0) {
        throw ShapeError("rotary embedding needs an even-length vector");
    }
    std::vector<float> out(x.begin(), x.end());
    rope_in_place(out, position, base, false);
    return out;
}

std::vector<float> rope_inverse(std::span<const float> x, std::int64_t position, double base) {
    if (x.size() % 2 != 0) {
        throw ShapeError("rotary embedding needs an even-length vector");
    }
    std::vector<float> out(x.begin(), x.end());
    rope_in_place(out, position, base, true);
    return out;
}

// ---------------------------------------------------------------------------
// Attention kernel

void attention_head(std::span<const float> query, std::span<const float> keys, std::span<const float> values,
                    std::size_t count, std::size_t dim, std::span<float> out, std::span<float> weights) {
    if (count == 0) {
        throw StateError("attention over an empty key set");
    }
    thread_local std::vector<float> scores;
    scores.resize(count);
    const float scale = 1.0f / std::sqrt(static_cast<float>(dim));
    float max_score = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < count; ++j) {
        const float* k = &keys[j * dim];
        float dot = 0.0f;
        for (std::size_t i = 0; i < dim; ++i) dot += query[i] * k[i];
        scores[j] = dot * scale;
        max_score = std::max(max_score, scores[j]);
    }
    float total = 0.0f;
    for (std::size_t j = 0; j < count; ++j) {
        scores[j] = std::exp(scores[j] - max_score);
        total += scores[j];
    }
    std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(dim), 0.0f);
    for (std::size_t j = 0; j < count; ++j) {
        const float p = scores[j] / total;
        if (!weights.empty()) weights[j] = p;
        const float* v = &values[j * dim];
        for (std::size_t i = 0; i < dim; ++i) out[i] += p * v[i];
    }
}

// ---------------------------------------------------------------------------
// ToyModel

ToyModel::ToyModel(const ModelSpec& spec) : spec_(spec) {
    spec_.validate();
    std::mt19937_64 rng(spec_.seed);
    const std::size_t hidden = spec_.hidden_dim();
    const std::size_t q_dim = spec_.num_q_heads * spec_.head_dim;
    const std::size_t kv_dim = spec_.kv_dim();
    const std::size_t mlp = spec_.mlp_dim();

    embedding_ = draw_uniform(rng, spec_.vocab_size, hidden, 1.0);
    layers_.reserve(spec_.num_layers);
    for (std::size_t l = 0; l < spec_.num_layers; ++l) {
        LayerWeights w;
        w.wq = draw_uniform(rng, q_dim, hidden, static_cast<double>(hidden));
        w.wk = draw_uniform(rng, kv_dim, hidden, static_cast<double>(hidden));
        w.wv = draw_uniform(rng, kv_dim, hidden, static_cast<double>(hidden));
        w.wo = draw_uniform(rng, hidden, q_dim, static_cast<double>(q_dim));
        w.w1 = draw_uniform(rng, mlp, hidden, static_cast<double>(hidden));
        w.w2 = draw_uniform(rng, hidden, mlp, static_cast<double>(mlp));
        layers_.push_back(std::move(w));
    }
    unembedding_ = draw_uniform(rng, spec_.vocab_size, hidden, static_cast<double>(hidden));
}

void ToyModel::check_tokens(std::span<const TokenId> tokens) const {
    if (tokens.empty()) {
        throw InputError("token sequence is empty");
    }
    for (TokenId t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= spec_.vocab_size) {
            throw InputError("token id " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(spec_.vocab_size));
        }
    }
}

std::vector<float> ToyModel::embed(TokenId token) const {
    if (token < 0 || static_cast<std::size_t>(token) >= spec_.vocab_size) {
        throw InputError("token id " + std::to_string(token) + " outside vocabulary");
    }
    const auto row = embedding_.row(static_cast<std::size_t>(token));
    return {row.begin(), row.end()};
}

namespace {

/// MLP half of a block applied to every row of `h` in place.
void mlp_rows(const ToyModel::LayerWeights& w, Tensor& h) {
    Tensor up = linear(rms_norm_rows(h), w.w1);
    for (float& x : up.data) x = gelu(x);
    as_matrix(h).noalias() += as_matrix(up) * as_matrix(w.w2).transpose();
}

/// One transformer block over a whole sequence. When `config` is set the
/// block's K/V pass through eviction and quantization first.
LayerPass run_layer(const ToyModel& model, std::size_t layer, const Tensor& input,
                    const LayerCompressionConfig* config, const PerturbationOptions& options) {
    const ModelSpec& spec = model.spec();
    const auto& w = model.layer(layer);
    const std::size_t tokens = input.dim(0);
    const std::size_t d = spec.head_dim;
    const std::size_t nq = spec.num_q_heads;
    const std::size_t nkv = spec.num_kv_heads;
    const std::size_t group = spec.group_size();

    const Tensor normed = rms_norm_rows(input);
    Tensor q = linear(normed, w.wq);
    Tensor k = linear(normed, w.wk);
    Tensor v = linear(normed, w.wv);
    const Tensor q_pre = q;
    const Tensor k_pre = k;
    for (std::size_t t = 0; t < tokens; ++t) {
        rope_heads(q.row(t), nq, d, static_cast<std::int64_t>(t), spec.rope_base);
        rope_heads(k.row(t), nkv, d, static_cast<std::int64_t>(t), spec.rope_base);
    }

    Tensor keys = to_head_major(k, nkv, d);    // [H_kv, T, d]
    Tensor values = to_head_major(v, nkv, d);
    std::vector<std::uint8_t> retained(tokens, 1);

    if (config != nullptr) {
        if (!config->keep.is_identity()) {
            eviction::ImportanceScores scores;
            switch (options.scorer) {
                case eviction::ScorerKind::kRandomPerm:
                    scores = eviction::score_random_permutation(tokens, options.scorer_seed);
                    break;
                case eviction::ScorerKind::kAttnAccum: {
                    // column sums of the dense causal attention, over heads and queries
                    scores = {std::vector<double>(tokens, 0.0), eviction::ScorerKind::kAttnAccum};
                    std::vector<float> out(d);
                    std::vector<float> weights(tokens);
                    for (std::size_t t = 0; t < tokens; ++t) {
                        for (std::size_t h = 0; h < nq; ++h) {
                            const std::size_t kv = h / group;
                            attention_head(q.row(t).subspan(h * d, d), keys.row(kv), values.row(kv), t + 1, d, out,
                                           weights);
                            for (std::size_t j = 0; j <= t; ++j) scores.scores[j] += weights[j];
                        }
                    }
                    break;
                }
                case eviction::ScorerKind::kTrig: {
                    const std::size_t window = std::min(tokens, std::max<std::size_t>(1, options.trig_query_window));
                    std::vector<float> direction(d, 0.0f);
                    for (std::size_t t = tokens - window; t < tokens; ++t) {
                        for (std::size_t h = 0; h < nq; ++h) {
                            for (std::size_t i = 0; i < d; ++i) direction[i] += q_pre.at(t, h * d + i);
                        }
                    }
                    scores = eviction::score_trigonometric(to_head_major(k_pre, nkv, d), direction);
                    break;
                }
            }
            const auto kept = eviction::select_retained(scores, config->keep, tokens);
            std::fill(retained.begin(), retained.end(), 0);
            for (std::size_t i : kept.indices) retained[i] = 1;
        }
        keys = quant::dequantize(quant::quantize_k(keys, config->k_bits));
        values = quant::dequantize(quant::quantize_v(values, config->v_bits, options.v_group_size));
    }

    LayerPass pass;
    pass.attention = Tensor({tokens, nq * d});
    std::vector<float> k_rows(tokens * d);
    std::vector<float> v_rows(tokens * d);
    for (std::size_t kv = 0; kv < nkv; ++kv) {
        const auto key_rows = keys.row(kv);
        const auto value_rows = values.row(kv);
        for (std::size_t t = 0; t < tokens; ++t) {
            // visible set: retained positions <= t, plus t itself
            std::size_t n = 0;
            for (std::size_t j = 0; j <= t; ++j) {
                if (retained[j] || j == t) {
                    std::copy_n(&key_rows[j * d], d, &k_rows[n * d]);
                    std::copy_n(&value_rows[j * d], d, &v_rows[n * d]);
                    ++n;
                }
            }
            for (std::size_t h = kv * group; h < (kv + 1) * group; ++h) {
                attention_head(q.row(t).subspan(h * d, d), k_rows, v_rows, n, d,
                               pass.attention.row(t).subspan(h * d, d));
            }
        }
    }

    pass.output = input;
    as_matrix(pass.output).noalias() += as_matrix(pass.attention) * as_matrix(w.wo).transpose();
    mlp_rows(w, pass.output);
    return pass;
}

Tensor final_logits(const ToyModel& model, const Tensor& hidden) {
    return linear(rms_norm_rows(hidden), model.unembedding());
}

Tensor embed_rows(const ToyModel& model, std::span<const TokenId> tokens) {
    const std::size_t hidden = model.spec().hidden_dim();
    Tensor x({tokens.size(), hidden});
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const auto row = model.embedding().row(static_cast<std::size_t>(tokens[t]));
        std::copy(row.begin(), row.end(), x.row(t).begin());
    }
    return x;
}

}  // namespace

ForwardRecording ToyModel::forward_recorded(std::span<const TokenId> tokens) const {
    check_tokens(tokens);
    ForwardRecording rec;
    rec.tokens.assign(tokens.begin(), tokens.end());
    Tensor h = embed_rows(*this, tokens);
    const PerturbationOptions unused;
    for (std::size_t l = 0; l < spec_.num_layers; ++l) {
        rec.layer_inputs.push_back(h);
        LayerPass pass = run_layer(*this, l, h, nullptr, unused);
        rec.activations.attention.push_back(std::move(pass.attention));
        h = std::move(pass.output);
    }
    rec.activations.logits = final_logits(*this, h);
    return rec;
}

LayerActivations ToyModel::forward_full(std::span<const TokenId> tokens) const {
    return forward_recorded(tokens).activations;
}

LayerActivations ToyModel::resume_with_perturbation(const ForwardRecording& recording, std::size_t layer,
                                                    const LayerCompressionConfig& config,
                                                    const PerturbationOptions& options, bool compute_logits) const {
    if (layer >= spec_.num_layers) {
        throw InputError("layer index " + std::to_string(layer) + " out of range");
    }
    if (recording.layer_inputs.size() != spec_.num_layers) {
        throw InputError("recording does not cover every layer");
    }
    LayerActivations acts;
    acts.attention.assign(recording.activations.attention.begin(),
                          recording.activations.attention.begin() + static_cast<std::ptrdiff_t>(layer));
    LayerPass pass = run_layer(*this, layer, recording.layer_inputs[layer], &config, options);
    acts.attention.push_back(std::move(pass.attention));
    if (!compute_logits) {
        return acts;
    }
    Tensor h = std::move(pass.output);
    for (std::size_t l = layer + 1; l < spec_.num_layers; ++l) {
        LayerPass next = run_layer(*this, l, h, nullptr, options);
        acts.attention.push_back(std::move(next.attention));
        h = std::move(next.output);
    }
    acts.logits = final_logits(*this, h);
    return acts;
}

LayerActivations ToyModel::forward_with_layer_perturbation(std::span<const TokenId> tokens, std::size_t layer,
                                                           const LayerCompressionConfig& config,
                                                           const PerturbationOptions& options) const {
    if (layer >= spec_.num_layers) {
        throw InputError("layer index " + std::to_string(layer) + " out of range");
    }
    return resume_with_perturbation(forward_recorded(tokens), layer, config, options, true);
}

TokenProjection ToyModel::project(std::size_t layer, std::span<const float> hidden, std::int64_t position) const {
    const auto& w = layers_.at(layer);
    const std::size_t hidden_dim = spec_.hidden_dim();
    std::vector<float> normed(hidden_dim);
    rms_norm(hidden, normed);
    const ConstVectorMap x(normed.data(), static_cast<Eigen::Index>(hidden_dim));

    TokenProjection p;
    auto apply = [&](const Tensor& m) {
        std::vector<float> out(m.dim(0));
        VectorMap(out.data(), static_cast<Eigen::Index>(out.size())).noalias() = as_matrix(m) * x;
        return out;
    };
    p.q_pre = apply(w.wq);
    p.k_pre = apply(w.wk);
    p.v = apply(w.wv);
    p.q = p.q_pre;
    p.k = p.k_pre;
    rope_heads(p.q, spec_.num_q_heads, spec_.head_dim, position, spec_.rope_base);
    rope_heads(p.k, spec_.num_kv_heads, spec_.head_dim, position, spec_.rope_base);
    return p;
}

void ToyModel::finish_layer(std::size_t layer, std::span<float> hidden, std::span<const float> attention) const {
    const auto& w = layers_.at(layer);
    const auto hidden_dim = static_cast<Eigen::Index>(spec_.hidden_dim());
    VectorMap h(hidden.data(), hidden_dim);
    h.noalias() += as_matrix(w.wo) * ConstVectorMap(attention.data(), static_cast<Eigen::Index>(attention.size()));

    std::vector<float> normed(spec_.hidden_dim());
    rms_norm(hidden, normed);
    Eigen::VectorXf up = as_matrix(w.w1) * ConstVectorMap(normed.data(), hidden_dim);
    for (Eigen::Index i = 0; i < up.size(); ++i) up[i] = gelu(up[i]);
    h.noalias() += as_matrix(w.w2) * up;
}

std::vector<float> ToyModel::logits(std::span<const float> hidden) const {
    std::vector<float> normed(spec_.hidden_dim());
    rms_norm(hidden, normed);
    std::vector<float> out(spec_.vocab_size);
    VectorMap(out.data(), static_cast<Eigen::Index>(out.size())).noalias() =
        as_matrix(unembedding_) * ConstVectorMap(normed.data(), static_cast<Eigen::Index>(normed.size()));
    return out;
}

// ---------------------------------------------------------------------------
// DenseDecoder

DenseDecoder::DenseDecoder(const ToyModel& model)
    : model_(&model),
      keys_(model.spec().num_layers, std::vector<std::vector<float>>(model.spec().num_kv_heads)),
      values_(model.spec().num_layers, std::vector<std::vector<float>>(model.spec().num_kv_heads)) {}

std::vector<float> DenseDecoder::step(TokenId token) {
    const ModelSpec& spec = model_->spec();
    const std::size_t d = spec.head_dim;
    const std::size_t group = spec.group_size();
    std::vector<float> hidden = model_->embed(token);
    std::vector<float> attention(spec.num_q_heads * d);
    const auto count = static_cast<std::size_t>(position_ + 1);

    for (std::size_t l = 0; l < spec.num_layers; ++l) {
        const TokenProjection p = model_->project(l, hidden, position_);
        for (std::size_t kv = 0; kv < spec.num_kv_heads; ++kv) {
            keys_[l][kv].insert(keys_[l][kv].end(), p.k.begin() + static_cast<std::ptrdiff_t>(kv * d),
                                p.k.begin() + static_cast<std::ptrdiff_t>((kv + 1) * d));
            values_[l][kv].insert(values_[l][kv].end(), p.v.begin() + static_cast<std::ptrdiff_t>(kv * d),
                                  p.v.begin() + static_cast<std::ptrdiff_t>((kv + 1) * d));
        }
        for (std::size_t h = 0; h < spec.num_q_heads; ++h) {
            const std::size_t kv = h / group;
            attention_head(std::span<const float>(p.q).subspan(h * d, d), keys_[l][kv], values_[l][kv], count, d,
                           std::span<float>(attention).subspan(h * d, d));
        }
        model_->finish_layer(l, hidden, attention);
    }
    ++position_;
    return model_->logits(hidden);
}

// ---------------------------------------------------------------------------

LogitsChecksum logits_checksum(const Tensor& logits) {
    LogitsChecksum c;
    for (float x : logits.data) {
        c.sum += x;
        c.l2 += static_cast<double>(x) * x;
    }
    c.l2 = std::sqrt(c.l2);
    return c;
}

std::vector<TokenId> calibration_prompt(const ModelSpec& spec) {
    static constexpr std::array<TokenId, 27> kPrompt = {17, 203, 88,  140, 5,   61,  229, 34, 112,
                                                        96, 7,   181, 45,  250, 19,  133, 72, 208,
                                                        3,  157, 64,  121, 38,  246, 90,  11, 175};
    std::vector<TokenId> out;
    out.reserve(kPrompt.size());
    for (TokenId t : kPrompt) out.push_back(static_cast<TokenId>(static_cast<std::size_t>(t) % spec.vocab_size));
    return out;
}

std::vector<TokenId> random_tokens(std::size_t length, std::size_t vocab_size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<TokenId> out(length);
    for (auto& t : out) t = static_cast<TokenId>(rng() % vocab_size);
    return out;
}

}  // namespace moend
