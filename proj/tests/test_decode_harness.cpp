// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "moend/decode_harness.hpp"
#include "moend/errors.hpp"
#include "test_util.hpp"

namespace moend::decode {
namespace {

using solver::CacheDims;
using solver::Policy;

struct Fixture {
    ModelSpec spec;
    ToyModel model{spec};
    std::vector<TokenId> prompt = random_tokens(64, spec.vocab_size, 77);
};

const Fixture& fixture() {
    static const Fixture f;
    return f;
}

std::vector<LayerCompressionConfig> uniform(const ModelSpec& s, LayerCompressionConfig c) {
    return std::vector<LayerCompressionConfig>(s.num_layers, c);
}

DecodeOptions opts(std::size_t period = 32) {
    DecodeOptions o;
    o.eviction_period = period;
    o.seed = 5;
    return o;
}

TEST(Decode, IdentityMatchesDense) {
    const auto& f = fixture();
    const auto trace = decode(f.model, f.prompt, uniform(f.spec, {}), 96, opts());
    ASSERT_EQ(trace.steps.size(), 96u);
    EXPECT_EQ(trace.compressed_tokens(), trace.dense_tokens());
    EXPECT_LT(trace.max_logit_deviation, 1e-5);
    EXPECT_LT(trace.mean_kl, 1e-10);
    EXPECT_EQ(trace.first_divergence, 96u);
    EXPECT_TRUE(trace.evictions.empty());
    for (std::size_t l : trace.final_layer_lengths) EXPECT_EQ(l, 64u + 96u);
    EXPECT_EQ(trace.prompt_length, 64u);
}

TEST(Decode, DenseReferenceMatchesDenseDecoder) {
    const auto& f = fixture();
    const auto ref = dense_reference(f.model, f.prompt, 12);
    ASSERT_EQ(ref->tokens.size(), 12u);
    DenseDecoder dec(f.model);
    std::vector<float> logits;
    for (TokenId t : f.prompt) logits = dec.step(t);
    for (std::size_t i = 0; i < 12; ++i) {
        EXPECT_LT(testing::max_abs_diff(ref->logits[i], logits), 1e-5);
        const auto best = static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        EXPECT_EQ(ref->tokens[i], best);
        logits = dec.step(best);
    }
    EXPECT_EQ(dense_reference(f.model, f.prompt, 12).get(), ref.get());
}

TEST(Decode, ZeroStepsGivesEmptyTrace) {
    const auto& f = fixture();
    const auto trace = decode(f.model, f.prompt, uniform(f.spec, {}), 0, opts());
    EXPECT_TRUE(trace.steps.empty());
    EXPECT_EQ(trace.mean_kl, 0.0);
    EXPECT_EQ(trace.first_divergence, 0u);
}

TEST(Decode, AggressiveCompressionDivergesMore) {
    const auto& f = fixture();
    const auto id = decode(f.model, f.prompt, uniform(f.spec, {}), 96, opts());
    const auto hard = decode(f.model, f.prompt, uniform(f.spec, LayerCompressionConfig::make(0.1, 4, 4)), 96, opts());
    EXPECT_GT(hard.mean_kl, id.mean_kl);
    EXPECT_GT(hard.max_logit_deviation, id.max_logit_deviation);
    EXPECT_FALSE(hard.evictions.empty());
    EXPECT_EQ(hard.dense_tokens(), id.dense_tokens());
}

TEST(Decode, RealizedBytesWithinOneTokenPerLayer) {
    const auto& f = fixture();
    const std::size_t steps = 96;
    const auto dims = CacheDims::from_spec(f.spec, f.prompt.size() + steps);
    const double slack = static_cast<double>(f.spec.num_layers * f.spec.num_kv_heads * f.spec.head_dim * 4);
    for (const auto cfg : {LayerCompressionConfig::make(0.1, 4, 4), LayerCompressionConfig::make(0.5, 8, 4),
                           LayerCompressionConfig::make(0.25, 16, 8), LayerCompressionConfig::identity()}) {
        const auto plan = solver::uniform_plan(cfg, dims, Policy::k2dUniform, solver::budget_from_bytes(1u << 30));
        const auto trace = decode(f.model, f.prompt, plan, steps, opts(40));
        EXPECT_LE(static_cast<double>(trace.final_payload_bytes), plan.total_memory + slack) << cfg.id();
        EXPECT_EQ(trace.final_payload_bytes, trace.steps.back().payload_bytes);
        EXPECT_GE(trace.peak_payload_bytes, trace.final_payload_bytes);
    }
}

TEST(Decode, EvictionEventsFollowPeriod) {
    const auto& f = fixture();
    const auto trace = decode(f.model, f.prompt, uniform(f.spec, LayerCompressionConfig::make(0.5, 16, 16)), 64,
                              opts(32));
    ASSERT_FALSE(trace.evictions.empty());
    for (const auto& e : trace.evictions) {
        EXPECT_EQ(e.step % 32, 0);
        EXPECT_LT(e.after, e.before);
    }
    for (std::size_t l : trace.final_layer_lengths) EXPECT_LE(l, 64u + 64u);
}

TEST(Decode, AllScorersRunDeterministically) {
    const auto& f = fixture();
    for (auto kind : {eviction::ScorerKind::kAttnAccum, eviction::ScorerKind::kTrig, eviction::ScorerKind::kRandomPerm}) {
        auto o = opts();
        o.scorer = kind;
        const auto cfg = uniform(f.spec, LayerCompressionConfig::make(0.25, 8, 4));
        const auto a = decode(f.model, f.prompt, cfg, 48, o);
        const auto b = decode(f.model, f.prompt, cfg, 48, o);
        EXPECT_EQ(a.compressed_tokens(), b.compressed_tokens());
        EXPECT_EQ(a.mean_kl, b.mean_kl);
        EXPECT_TRUE(std::isfinite(a.mean_kl));
    }
}

TEST(Decode, PlanMismatchIsConfigError) {
    const auto& f = fixture();
    EXPECT_THROW(decode(f.model, f.prompt, std::vector<LayerCompressionConfig>(f.spec.num_layers + 1), 4, opts()),
                 ConfigError);
    auto dims = CacheDims::from_spec(f.spec, 100);
    dims.num_kv_heads += 1;
    const auto plan = solver::uniform_plan({}, dims, Policy::kFull, solver::budget_from_bytes(1));
    EXPECT_THROW(decode(f.model, f.prompt, plan, 4, opts()), ConfigError);
}

TEST(Decode, TraceJson) {
    const auto& f = fixture();
    const auto trace = decode(f.model, f.prompt, uniform(f.spec, LayerCompressionConfig::make(0.5, 8, 4)), 8, opts(4));
    const auto j = to_json(trace);
    EXPECT_EQ(j.at("steps").size(), 8u);
    EXPECT_EQ(j.at("prompt_length").get<std::size_t>(), 64u);
    EXPECT_TRUE(j.contains("mean_kl"));
}

PlanRun run_for(const Fixture& f, Policy p, std::uint64_t b) {
    const auto dims = CacheDims::from_spec(f.spec, 128);
    const auto budget = solver::budget_from_tokens(b, p, dims);
    const auto cfg = p == Policy::kFull ? LayerCompressionConfig::identity() : LayerCompressionConfig::make(0.5, 8, 4);
    PlanRun r{solver::uniform_plan(cfg, dims, p, budget), {}};
    r.trace = decode(f.model, f.prompt, r.plan, 16, opts());
    return r;
}

TEST(MemoryReport, SingleRow) {
    const auto& f = fixture();
    const auto rows = memory_report({run_for(f, Policy::kFull, 64)});
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].policy, "full");
    EXPECT_EQ(*rows[0].b, 64u);
    EXPECT_EQ(rows[0].steps, 16u);
    EXPECT_EQ(rows[0].mean_kl, 0.0);
    EXPECT_EQ(memory_report({}).size(), 0u);
}

TEST(MemoryReport, SweepSixteenRowsOrderedByBudget) {
    const auto& f = fixture();
    std::vector<PlanRun> runs;
    for (std::uint64_t b : {512u, 64u, 256u, 128u}) {
        for (auto p : {Policy::k2dHetero, Policy::k1d, Policy::k2d, Policy::k2dUniform}) runs.push_back(run_for(f, p, b));
    }
    const auto rows = memory_report(runs);
    ASSERT_EQ(rows.size(), 16u);
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_LE(*rows[i - 1].b, *rows[i].b);
    EXPECT_EQ(rows[0].policy, "1d");
    EXPECT_EQ(rows[3].policy, "2d_hetero");
    const std::string csv = report_csv(rows);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "policy,b,M_bytes,realized_bytes,mean_kl,first_divergence,steps");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 17);
    EXPECT_EQ(to_json(rows).size(), 16u);
}

TEST(MemoryReport, FullScaleDimsPredictedBytes) {
    const double mib = 1024.0 * 1024.0;
    const double expected[] = {56, 112, 224, 448};
    std::size_t i = 0;
    for (std::uint64_t b : {512u, 1024u, 2048u, 4096u}) {
        const auto dims = CacheDims::full_scale(b);
        const auto plan = solver::uniform_plan({}, dims, Policy::k1d, solver::budget_from_tokens(b, Policy::k1d, dims));
        EXPECT_EQ(plan.total_memory / mib, expected[i++]);
    }
}

}  // namespace
}  // namespace moend::decode
