// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#include "moend/decode_harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <map>
#include <mutex>
#include <sstream>

#include <nlohmann/json.hpp>

#include "moend/calibration.hpp"
#include "moend/errors.hpp"

namespace moend::decode {

namespace {

TokenId argmax(std::span<const float> logits) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

std::string reference_key(const ModelSpec& spec, std::span<const TokenId> prompt, std::size_t steps) {
    std::uint64_t h = 1469598103934665603ull;
    for (TokenId t : prompt) {
        h ^= static_cast<std::uint32_t>(t);
        h *= 1099511628211ull;
    }
    return spec.hash() + ':' + std::to_string(prompt.size()) + ':' + std::to_string(h) + ':' + std::to_string(steps);
}

template <typename T>
void keep_indices(std::vector<T>& rows, std::span<const std::size_t> indices) {
    std::vector<T> kept;
    kept.reserve(indices.size());
    for (std::size_t i : indices) kept.push_back(std::move(rows[i]));
    rows = std::move(kept);
}

// Per-layer bookkeeping the eviction scorers need alongside the cache.
struct ScorerState {
    eviction::AttentionAccumulator accumulated;
    std::vector<std::vector<float>> pre_rope_keys;  // one [H_kv * d] row per cached token
    std::deque<std::vector<float>> recent_queries;  // pre-RoPE [num_q_heads * d]
};

eviction::ImportanceScores score_layer(const ModelSpec& spec, const ScorerState& state, std::size_t layer,
                                       std::size_t length, std::int64_t step, const DecodeOptions& options) {
    switch (options.scorer) {
        case eviction::ScorerKind::kAttnAccum:
            return state.accumulated.scores();
        case eviction::ScorerKind::kRandomPerm:
            return eviction::score_random_permutation(
                length, mix(options.seed ^ mix(static_cast<std::uint64_t>(step) * 0x9E3779B97F4A7C15ull + layer)));
        case eviction::ScorerKind::kTrig: {
            const std::size_t d = spec.head_dim;
            Tensor keys({spec.num_kv_heads, length, d});
            for (std::size_t t = 0; t < length; ++t) {
                for (std::size_t h = 0; h < spec.num_kv_heads; ++h) {
                    std::copy_n(state.pre_rope_keys[t].data() + h * d, d, &keys.at(h, t, 0));
                }
            }
            std::vector<float> direction(d, 0.0f);
            for (const auto& q : state.recent_queries) {
                for (std::size_t h = 0; h < spec.num_q_heads; ++h) {
                    for (std::size_t i = 0; i < d; ++i) direction[i] += q[h * d + i];
                }
            }
            return eviction::score_trigonometric(keys, direction);
        }
    }
    throw ConfigError("unknown scorer");
}

}  // namespace

std::shared_ptr<const DenseReference> dense_reference(const ToyModel& model, std::span<const TokenId> prompt,
                                                      std::size_t steps) {
    static std::mutex mutex;
    static std::map<std::string, std::shared_ptr<const DenseReference>> cache;
    const std::string key = reference_key(model.spec(), prompt, steps);
    {
        std::lock_guard lock(mutex);
        if (auto it = cache.find(key); it != cache.end()) return it->second;
    }
    if (prompt.empty()) throw InputError("decode needs a non-empty prompt");
    model.check_tokens(prompt);
    auto ref = std::make_shared<DenseReference>();
    DenseDecoder dense(model);
    std::vector<float> logits;
    for (TokenId t : prompt) logits = dense.step(t);
    for (std::size_t s = 0; s < steps; ++s) {
        const TokenId next = argmax(logits);
        ref->tokens.push_back(next);
        ref->logits.push_back(logits);
        if (s + 1 < steps) logits = dense.step(next);
    }
    std::lock_guard lock(mutex);
    return cache.emplace(key, std::move(ref)).first->second;
}

std::vector<TokenId> DecodeTrace::dense_tokens() const {
    std::vector<TokenId> out;
    for (const auto& s : steps) out.push_back(s.token);
    return out;
}

std::vector<TokenId> DecodeTrace::compressed_tokens() const {
    std::vector<TokenId> out;
    for (const auto& s : steps) out.push_back(s.compressed_token);
    return out;
}

DecodeTrace decode(const ToyModel& model, std::span<const TokenId> prompt,
                   const std::vector<LayerCompressionConfig>& configs, std::size_t steps,
                   const DecodeOptions& options) {
    const ModelSpec& spec = model.spec();
    if (configs.size() != spec.num_layers) {
        throw ConfigError("plan has " + std::to_string(configs.size()) + " layers, model has " +
                          std::to_string(spec.num_layers));
    }
    if (prompt.empty()) throw InputError("decode needs a non-empty prompt");
    model.check_tokens(prompt);

    DecodeTrace trace;
    trace.prompt_length = prompt.size();
    trace.first_divergence = steps;
    if (steps == 0) return trace;

    const auto reference = dense_reference(model, prompt, steps);
    HeteroKVCache cache(spec, configs, options.eviction_period, options.v_group_size);
    std::vector<ScorerState> scorers(spec.num_layers);
    const bool track_attention = options.scorer == eviction::ScorerKind::kAttnAccum;
    const bool track_keys = options.scorer == eviction::ScorerKind::kTrig;
    const std::size_t window = std::max<std::size_t>(1, options.trig_query_window);

    auto lengths = [&] {
        std::vector<std::size_t> out;
        for (std::size_t l = 0; l < spec.num_layers; ++l) out.push_back(cache.layer(l).length());
        return out;
    };

    auto feed = [&](TokenId token, bool decoding) {
        const std::int64_t pos = cache.step();
        std::vector<float> hidden = model.embed(token);
        std::vector<float> weights;
        for (std::size_t l = 0; l < spec.num_layers; ++l) {
            const TokenProjection p = model.project(l, hidden, pos);
            cache.append(l, p.k, p.v, pos);
            auto& sc = scorers[l];
            const bool score_now = decoding && track_attention;
            if (track_attention) sc.accumulated.resize(cache.layer(l).length());
            const Tensor attention = cache.attend(l, p.q_pre, pos, score_now ? &weights : nullptr);
            if (score_now) sc.accumulated.add(weights);
            if (track_keys) {
                sc.pre_rope_keys.push_back(p.k_pre);
                sc.recent_queries.push_back(p.q_pre);
                if (sc.recent_queries.size() > window) sc.recent_queries.pop_front();
            }
            model.finish_layer(l, hidden, attention.data);
        }
        cache.advance();
        if (decoding && cache.eviction_due()) {
            for (std::size_t l = 0; l < spec.num_layers; ++l) {
                const std::size_t before = cache.layer(l).length();
                const auto scores = score_layer(spec, scorers[l], l, before, cache.step(), options);
                const auto kept = cache.maybe_evict(l, scores);
                if (!kept) continue;
                if (track_attention) scorers[l].accumulated.retain(kept->indices);
                if (track_keys) keep_indices(scorers[l].pre_rope_keys, kept->indices);
                trace.evictions.push_back({cache.step(), l, before, kept->indices.size()});
            }
        }
        trace.peak_payload_bytes = std::max(trace.peak_payload_bytes, cache.payload_bytes());
        return model.logits(hidden);
    };

    std::vector<float> logits;
    for (TokenId t : prompt) logits = feed(t, false);

    double kl_total = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
        const auto& ref_logits = reference->logits[s];
        StepRecord rec;
        rec.position = static_cast<std::int64_t>(prompt.size() + s);
        rec.token = reference->tokens[s];
        rec.compressed_token = argmax(logits);
        rec.kl = calib::kl_from_logits(ref_logits, logits);
        for (std::size_t i = 0; i < logits.size(); ++i) {
            rec.max_logit_deviation =
                std::max(rec.max_logit_deviation, static_cast<double>(std::abs(ref_logits[i] - logits[i])));
        }
        if (rec.compressed_token != rec.token && trace.first_divergence == steps) trace.first_divergence = s;
        kl_total += rec.kl;
        trace.max_logit_deviation = std::max(trace.max_logit_deviation, rec.max_logit_deviation);

        logits = feed(rec.token, true);
        rec.layer_lengths = lengths();
        rec.payload_bytes = cache.payload_bytes();
        trace.steps.push_back(std::move(rec));
    }
    trace.mean_kl = kl_total / static_cast<double>(steps);
    trace.final_payload_bytes = cache.payload_bytes();
    trace.final_layer_lengths = lengths();
    return trace;
}

DecodeTrace decode(const ToyModel& model, std::span<const TokenId> prompt, const solver::RoutingPlan& plan,
                   std::size_t steps, const DecodeOptions& options) {
    const ModelSpec& spec = model.spec();
    if (plan.layers.size() != spec.num_layers || plan.dims.num_kv_heads != spec.num_kv_heads ||
        plan.dims.head_dim != spec.head_dim) {
        throw ConfigError("routing plan geometry does not match the model");
    }
    return decode(model, prompt, plan.configs(), steps, options);
}

nlohmann::json to_json(const DecodeTrace& trace) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : trace.steps) {
        steps.push_back({{"position", s.position},
                         {"token", s.token},
                         {"compressed_token", s.compressed_token},
                         {"kl", s.kl},
                         {"max_logit_deviation", s.max_logit_deviation},
                         {"layer_lengths", s.layer_lengths},
                         {"payload_bytes", s.payload_bytes}});
    }
    nlohmann::json evictions = nlohmann::json::array();
    for (const auto& e : trace.evictions) {
        evictions.push_back({{"step", e.step}, {"layer", e.layer}, {"before", e.before}, {"after", e.after}});
    }
    return {{"format_version", 1},
            {"prompt_length", trace.prompt_length},
            {"mean_kl", trace.mean_kl},
            {"max_logit_deviation", trace.max_logit_deviation},
            {"first_divergence", trace.first_divergence},
            {"final_payload_bytes", trace.final_payload_bytes},
            {"peak_payload_bytes", trace.peak_payload_bytes},
            {"final_layer_lengths", trace.final_layer_lengths},
            {"evictions", std::move(evictions)},
            {"steps", std::move(steps)}};
}

std::vector<ReportRow> memory_report(const std::vector<PlanRun>& runs) {
    std::vector<ReportRow> rows;
    for (const auto& run : runs) {
        ReportRow r;
        r.policy = std::string(solver::policy_name(run.plan.policy));
        r.b = run.plan.budget.tokens;
        r.m_bytes = run.plan.budget.bytes;
        r.predicted_bytes = run.plan.total_memory;
        r.realized_bytes = run.trace.final_payload_bytes;
        r.peak_bytes = run.trace.peak_payload_bytes;
        r.mean_kl = run.trace.mean_kl;
        r.max_logit_deviation = run.trace.max_logit_deviation;
        r.first_divergence = run.trace.first_divergence;
        r.steps = run.trace.steps.size();
        rows.push_back(std::move(r));
    }
    auto policy_rank = [](const std::string& p) { return static_cast<int>(solver::parse_policy(p)); };
    std::stable_sort(rows.begin(), rows.end(), [&](const ReportRow& a, const ReportRow& b) {
        const std::uint64_t ba = a.b.value_or(0);
        const std::uint64_t bb = b.b.value_or(0);
        if (ba != bb) return ba < bb;
        return policy_rank(a.policy) < policy_rank(b.policy);
    });
    return rows;
}

nlohmann::json to_json(const std::vector<ReportRow>& rows) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows) {
        out.push_back({{"policy", r.policy},
                       {"b", r.b ? nlohmann::json(*r.b) : nlohmann::json()},
                       {"M_bytes", r.m_bytes},
                       {"predicted_bytes", r.predicted_bytes},
                       {"realized_bytes", r.realized_bytes},
                       {"peak_bytes", r.peak_bytes},
                       {"mean_kl", r.mean_kl},
                       {"max_logit_deviation", r.max_logit_deviation},
                       {"first_divergence", r.first_divergence},
                       {"steps", r.steps}});
    }
    return out;
}

std::string report_csv(const std::vector<ReportRow>& rows) {
    std::ostringstream out;
    out << "policy,b,M_bytes,realized_bytes,mean_kl,first_divergence,steps\n";
    char kl[32];
    for (const auto& r : rows) {
        std::snprintf(kl, sizeof(kl), "%.9g", r.mean_kl);
        out << r.policy << ',' << (r.b ? std::to_string(*r.b) : std::string()) << ',' << r.m_bytes << ','
            << r.realized_bytes << ',' << kl << ',' << r.first_divergence << ',' << r.steps << '\n';
    }
    return out.str();
}

}  // namespace moend::decode
