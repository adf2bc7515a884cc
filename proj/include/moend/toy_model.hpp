// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "moend/compression_config.hpp"
#include "moend/eviction.hpp"
#include "moend/quantizer.hpp"
#include "moend/tensor.hpp"

namespace moend {

using TokenId = std::int32_t;

/// Shape and seed of the deterministic toy GQA transformer.
struct ModelSpec {
    std::size_t num_layers = 8;
    std::size_t num_q_heads = 4;
    std::size_t num_kv_heads = 2;
    std::size_t head_dim = 16;
    std::size_t vocab_size = 256;
    double rope_base = 10000.0;
    std::uint64_t seed = 42;

    std::size_t hidden_dim() const { return num_q_heads * head_dim; }
    std::size_t mlp_dim() const { return 4 * hidden_dim(); }
    std::size_t kv_dim() const { return num_kv_heads * head_dim; }
    std::size_t group_size() const { return num_q_heads / num_kv_heads; }

    /// Throws ConfigError on zero sizes, num_q_heads % num_kv_heads != 0, odd head_dim.
    void validate() const;

    /// 16 hex digits of FNV-1a over the canonical JSON form.
    std::string hash() const;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

void to_json(nlohmann::json& j, const ModelSpec& spec);
void from_json(const nlohmann::json& j, ModelSpec& spec);

/// Rotates dimension pairs (2i, 2i+1) by position * base^(-2i/d).
/// Throws ShapeError for odd-length input.
std::vector<float> rope_rotate(std::span<const float> x, std::int64_t position, double base);
std::vector<float> rope_inverse(std::span<const float> x, std::int64_t position, double base);

/// Per-layer attention outputs ([T, hidden_dim], heads concatenated before
/// the output projection) and final next-token logits ([T, vocab_size]).
struct LayerActivations {
    std::vector<Tensor> attention;
    Tensor logits;
};

/// How a perturbed layer picks its retained tokens and groups its V codes.
struct PerturbationOptions {
    eviction::ScorerKind scorer = eviction::ScorerKind::kRandomPerm;
    std::uint64_t scorer_seed = 0;
    std::size_t v_group_size = quant::kDefaultGroupSize;
    /// Recent positions averaged into the trigonometric scorer's query direction.
    std::size_t trig_query_window = 8;
};

/// Hidden states entering every layer of a dense forward, so perturbed
/// passes can restart at the perturbed layer.
struct ForwardRecording {
    std::vector<TokenId> tokens;
    std::vector<Tensor> layer_inputs;  // L entries of [T, hidden_dim]
    LayerActivations activations;
};

/// q/k/v of one token at one layer. q and k are rotated to `position`;
/// the pre-rotation copies feed the trigonometric scorer.
struct TokenProjection {
    std::vector<float> q;       // [num_q_heads * head_dim]
    std::vector<float> k;       // [num_kv_heads * head_dim]
    std::vector<float> v;       // [num_kv_heads * head_dim]
    std::vector<float> q_pre;
    std::vector<float> k_pre;
};

/// Pre-norm GQA transformer: RMSNorm -> attention -> residual ->
/// RMSNorm -> GELU MLP (4x) -> residual, untied embedding/unembedding,
/// no learned norm gains and no biases.
///
/// Weights are drawn from std::mt19937_64(spec.seed); each draw r maps to
/// (2 * (r >> 11) * 2^-53 - 1) / sqrt(fan_in). Draw order, each row-major
/// [out, in]: embedding [vocab, hidden] (fan_in taken as 1), then per layer
/// Wq, Wk, Wv, Wo, W1, W2, then the unembedding [vocab, hidden].
///
/// Immutable after construction; every method is const and thread-safe.
class ToyModel {
public:
    struct LayerWeights {
        Tensor wq;  // [num_q_heads * d, hidden]
        Tensor wk;  // [num_kv_heads * d, hidden]
        Tensor wv;  // [num_kv_heads * d, hidden]
        Tensor wo;  // [hidden, num_q_heads * d]
        Tensor w1;  // [mlp, hidden]
        Tensor w2;  // [hidden, mlp]
    };

    explicit ToyModel(const ModelSpec& spec);

    const ModelSpec& spec() const { return spec_; }
    const LayerWeights& layer(std::size_t index) const { return layers_.at(index); }
    const Tensor& embedding() const { return embedding_; }
    const Tensor& unembedding() const { return unembedding_; }

    /// Dense causal forward pass. Throws InputError on an empty sequence or
    /// an out-of-range token id.
    LayerActivations forward_full(std::span<const TokenId> tokens) const;

    /// forward_full that also keeps every layer's input hidden state.
    ForwardRecording forward_recorded(std::span<const TokenId> tokens) const;

    /// forward_full with `config` applied to layer `layer`'s K/V only
    /// (eviction, then K/V quantization). Query t attends to the retained
    /// tokens at positions <= t plus its own token.
    LayerActivations forward_with_layer_perturbation(std::span<const TokenId> tokens, std::size_t layer,
                                                     const LayerCompressionConfig& config,
                                                     const PerturbationOptions& options = {}) const;

    /// Same as above but resumes from a dense recording. With
    /// `compute_logits` false the returned logits tensor is empty and layers
    /// after `layer` are not evaluated.
    LayerActivations resume_with_perturbation(const ForwardRecording& recording, std::size_t layer,
                                              const LayerCompressionConfig& config,
                                              const PerturbationOptions& options, bool compute_logits) const;

    // Single-token primitives for incremental decoding.
    std::vector<float> embed(TokenId token) const;
    TokenProjection project(std::size_t layer, std::span<const float> hidden, std::int64_t position) const;
    /// hidden += Wo * attention; hidden += MLP(norm(hidden)).
    void finish_layer(std::size_t layer, std::span<float> hidden, std::span<const float> attention) const;
    std::vector<float> logits(std::span<const float> hidden) const;

    void check_tokens(std::span<const TokenId> tokens) const;

private:
    ModelSpec spec_;
    Tensor embedding_;
    std::vector<LayerWeights> layers_;
    Tensor unembedding_;
};

/// Softmax attention of one query head over `count` contiguous key/value
/// rows of length `dim`. Writes the weighted value sum to `out` and, if
/// non-empty, the attention weights to `weights`.
void attention_head(std::span<const float> query, std::span<const float> keys, std::span<const float> values,
                    std::size_t count, std::size_t dim, std::span<float> out, std::span<float> weights = {});

/// Incremental dense decoder with a plain float KV cache. This is the
/// uncompressed reference the compressed decode is compared against.
class DenseDecoder {
public:
    explicit DenseDecoder(const ToyModel& model);

    /// Feeds `token` at the next position and returns its logits row.
    std::vector<float> step(TokenId token);
    std::int64_t position() const { return position_; }

private:
    const ToyModel* model_;
    std::int64_t position_ = 0;
    // [layer][kv_head] -> rows of head_dim floats
    std::vector<std::vector<std::vector<float>>> keys_;
    std::vector<std::vector<std::vector<float>>> values_;
};

/// Sum and L2 norm of a logits tensor, used as the golden regression value.
struct LogitsChecksum {
    double sum = 0.0;
    double l2 = 0.0;
};
LogitsChecksum logits_checksum(const Tensor& logits);

/// Stand-in for the 27-token calibration prompt: a pinned token sequence.
std::vector<TokenId> calibration_prompt(const ModelSpec& spec);

/// Seeded uniform random token sequence.
std::vector<TokenId> random_tokens(std::size_t length, std::size_t vocab_size, std::uint64_t seed);

}  // namespace moend
