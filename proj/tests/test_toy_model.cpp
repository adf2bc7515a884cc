// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>
#include <thread>

#include <nlohmann/json.hpp>

#include "moend/errors.hpp"
#include "moend/toy_model.hpp"
#include "test_util.hpp"

namespace moend {
namespace {

using testing::reference_forward;
using testing::small_spec;

double dot(const std::vector<float>& a, const std::vector<float>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * b[i];
    return s;
}

TEST(ModelSpec, DeskDefaults) {
    const ModelSpec s;
    EXPECT_EQ(s.hidden_dim(), 64u);
    EXPECT_EQ(s.num_layers, 8u);
    EXPECT_EQ(s.group_size(), 2u);
    EXPECT_NO_THROW(s.validate());
}

TEST(ModelSpec, InvalidSpecsRejected) {
    ModelSpec s;
    s.num_kv_heads = 3;
    EXPECT_THROW(ToyModel{s}, ConfigError);
    s = ModelSpec{};
    s.head_dim = 15;
    EXPECT_THROW(ToyModel{s}, ConfigError);
    s = ModelSpec{};
    s.num_layers = 0;
    EXPECT_THROW(s.validate(), ConfigError);
}

TEST(ModelSpec, JsonRoundTripAndHash) {
    ModelSpec s = small_spec();
    const nlohmann::json j = s;
    EXPECT_EQ(j.get<ModelSpec>(), s);
    EXPECT_EQ(s.hash(), j.get<ModelSpec>().hash());
    EXPECT_EQ(s.hash().size(), 16u);
    ModelSpec other = s;
    other.seed += 1;
    EXPECT_NE(s.hash(), other.hash());
    nlohmann::json bad = j;
    bad["hidden_dim"] = 7;
    EXPECT_THROW(bad.get<ModelSpec>(), ConfigError);
}

TEST(ToyModel, EqualSpecsGiveIdenticalWeights) {
    ModelSpec s;
    s.seed = 7;
    const ToyModel a(s), b(s);
    EXPECT_EQ(a.embedding().data[0], b.embedding().data[0]);
    EXPECT_EQ(a.layer(3).w2.data, b.layer(3).w2.data);
    s.seed = 8;
    EXPECT_NE(ToyModel(s).embedding().data[0], a.embedding().data[0]);
}

TEST(ToyModel, WeightsWithinFanInBound) {
    const ToyModel m(ModelSpec{});
    const double bound = 1.0 / std::sqrt(64.0);
    for (float w : m.layer(0).wq.data) EXPECT_LE(std::abs(w), bound);
    for (float w : m.layer(0).w2.data) EXPECT_LE(std::abs(w), 1.0 / std::sqrt(256.0));
}

TEST(Rope, ZeroPositionIsIdentity) {
    const auto x = testing::random_tensor({16}, 1).data;
    EXPECT_EQ(rope_rotate(x, 0, 10000.0), x);
}

TEST(Rope, InverseRestoresInput) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto x = testing::random_tensor({16}, seed).data;
        const auto p = static_cast<std::int64_t>(seed * 37 % 4096);
        EXPECT_LE(testing::max_abs_diff(rope_rotate(rope_inverse(x, p, 10000.0), p, 10000.0), x), 1e-6);
    }
}

TEST(Rope, RelativePositionInvariance) {
    std::mt19937_64 rng(123);
    for (int trial = 0; trial < 100; ++trial) {
        const auto q = testing::random_tensor({16}, rng()).data;
        const auto k = testing::random_tensor({16}, rng()).data;
        const auto p1 = static_cast<std::int64_t>(rng() % 512);
        const auto p2 = static_cast<std::int64_t>(rng() % 512);
        const auto s = static_cast<std::int64_t>(rng() % 512);
        const double a = dot(rope_rotate(q, p1, 1e4), rope_rotate(k, p2, 1e4));
        const double b = dot(rope_rotate(q, p1 + s, 1e4), rope_rotate(k, p2 + s, 1e4));
        EXPECT_NEAR(a, b, 1e-5);
    }
}

TEST(Rope, PairRotationAngle) {
    const std::vector<float> x = {1, 0, 1, 0};
    const auto y = rope_rotate(x, 3, 100.0);
    EXPECT_NEAR(y[0], std::cos(3.0), 1e-6);
    EXPECT_NEAR(y[1], std::sin(3.0), 1e-6);
    EXPECT_NEAR(y[2], std::cos(0.3), 1e-6);
    EXPECT_NEAR(y[3], std::sin(0.3), 1e-6);
    EXPECT_THROW(rope_rotate(std::vector<float>{1, 2, 3}, 1, 1e4), ShapeError);
}

TEST(ForwardFull, DeterministicAndValidated) {
    const ToyModel m(ModelSpec{});
    const auto p = calibration_prompt(m.spec());
    ASSERT_EQ(p.size(), 27u);
    const auto a = m.forward_full(p);
    const auto b = m.forward_full(p);
    EXPECT_EQ(a.logits, b.logits);
    EXPECT_EQ(a.attention.size(), 8u);
    EXPECT_EQ(a.attention[0].shape, (std::vector<std::size_t>{27, 64}));
    EXPECT_EQ(a.logits.shape, (std::vector<std::size_t>{27, 256}));
    EXPECT_THROW(m.forward_full(std::vector<TokenId>{}), InputError);
    EXPECT_THROW(m.forward_full(std::vector<TokenId>{1, 256}), InputError);
    EXPECT_THROW(m.forward_full(std::vector<TokenId>{-1}), InputError);
}

TEST(ForwardFull, SingleTokenAttentionIsValueProjection) {
    const ToyModel m(ModelSpec{});
    const auto acts = m.forward_full(std::vector<TokenId>{42});
    const auto e = m.embedding().row(42);
    double ss = 0.0;
    for (float x : e) ss += double(x) * x;
    const double inv = 1.0 / std::sqrt(ss / 64.0 + 1e-6);
    const auto& wv = m.layer(0).wv;
    for (std::size_t h = 0; h < 4; ++h) {
        const std::size_t kv = h / 2;
        for (std::size_t i = 0; i < 16; ++i) {
            double v = 0.0;
            for (std::size_t c = 0; c < 64; ++c) v += double(wv.at(kv * 16 + i, c)) * e[c] * inv;
            EXPECT_NEAR(acts.attention[0].at(0, h * 16 + i), v, 1e-6);
        }
    }
}

TEST(ForwardFull, MatchesReferenceImplementationGqa) {
    const ToyModel m(ModelSpec{});
    const auto tokens = random_tokens(12, 256, 3);
    const auto acts = m.forward_full(tokens);
    const auto ref = reference_forward(m, tokens);
    double worst = 0.0;
    for (std::size_t l = 0; l < 8; ++l) {
        for (std::size_t t = 0; t < 12; ++t) {
            for (std::size_t i = 0; i < 64; ++i) {
                worst = std::max(worst, std::abs(acts.attention[l].at(t, i) - ref.attention[l][t][i]));
            }
        }
    }
    EXPECT_LT(worst, 1e-5);
    for (std::size_t t = 0; t < 12; ++t) {
        for (std::size_t i = 0; i < 256; ++i) EXPECT_NEAR(acts.logits.at(t, i), ref.logits[t][i], 1e-4);
    }
}

TEST(ForwardFull, MultiHeadMatchesPlainReference) {
    const ToyModel m(small_spec(2, 4, 4, 8, 32, 9));
    const auto tokens = random_tokens(10, 32, 4);
    const auto acts = m.forward_full(tokens);
    const auto ref = reference_forward(m, tokens);
    for (std::size_t l = 0; l < 2; ++l) {
        for (std::size_t t = 0; t < 10; ++t) {
            for (std::size_t i = 0; i < 32; ++i) {
                EXPECT_NEAR(acts.attention[l].at(t, i), ref.attention[l][t][i], 1e-6);
            }
        }
    }
}

TEST(ForwardFull, Causality) {
    const ToyModel m(small_spec());
    auto tokens = random_tokens(9, 32, 11);
    const auto base = m.forward_full(tokens);
    for (std::size_t edit = 1; edit < tokens.size(); ++edit) {
        auto changed = tokens;
        changed[edit] = (changed[edit] + 5) % 32;
        const auto other = m.forward_full(changed);
        for (std::size_t t = 0; t < edit; ++t) {
            for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(other.logits.at(t, i), base.logits.at(t, i));
        }
    }
}

TEST(ForwardFull, ConcurrentCallsAgree) {
    const ToyModel m(ModelSpec{});
    const auto tokens = random_tokens(40, 256, 8);
    const auto expected = m.forward_full(tokens).logits;
    std::vector<Tensor> got(4);
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < got.size(); ++i) {
        pool.emplace_back([&, i] { got[i] = m.forward_full(tokens).logits; });
    }
    for (auto& t : pool) t.join();
    for (const auto& g : got) EXPECT_EQ(g, expected);
}

TEST(Perturbation, IdentityMatchesFull) {
    const ToyModel m(ModelSpec{});
    const auto p = calibration_prompt(m.spec());
    const auto full = m.forward_full(p);
    for (std::size_t l = 0; l < 8; ++l) {
        const auto pert = m.forward_with_layer_perturbation(p, l, LayerCompressionConfig::identity());
        EXPECT_LE(testing::max_abs_diff(pert.logits.data, full.logits.data), 1e-6);
        for (std::size_t k = 0; k < 8; ++k) {
            EXPECT_LE(testing::max_abs_diff(pert.attention[k].data, full.attention[k].data), 1e-6);
        }
    }
}

TEST(Perturbation, EvictionPropagatesDownstreamOnly) {
    const ToyModel m(ModelSpec{});
    const auto p = calibration_prompt(m.spec());
    const auto full = m.forward_full(p);
    const auto pert = m.forward_with_layer_perturbation(p, 2, LayerCompressionConfig::make(0.5, 16, 16));
    for (std::size_t l = 0; l < 2; ++l) EXPECT_EQ(pert.attention[l], full.attention[l]);
    for (std::size_t l = 2; l < 8; ++l) EXPECT_GT(testing::max_abs_diff(pert.attention[l].data, full.attention[l].data), 0.0);
    EXPECT_GT(testing::max_abs_diff(pert.logits.data, full.logits.data), 0.0);
    EXPECT_THROW(m.forward_with_layer_perturbation(p, 8, LayerCompressionConfig::identity()), InputError);
}

TEST(Perturbation, ResumeMatchesFromScratch) {
    const ToyModel m(ModelSpec{});
    const auto p = random_tokens(30, 256, 2);
    const auto rec = m.forward_recorded(p);
    const auto cfg = LayerCompressionConfig::make(0.75, 8, 4);
    PerturbationOptions o;
    o.scorer_seed = 99;
    const auto a = m.resume_with_perturbation(rec, 4, cfg, o, true);
    const auto b = m.forward_with_layer_perturbation(p, 4, cfg, o);
    EXPECT_EQ(a.logits, b.logits);
}

TEST(DenseDecoder, MatchesBatchForward) {
    const ToyModel m(ModelSpec{});
    const auto tokens = random_tokens(20, 256, 6);
    const auto full = m.forward_full(tokens);
    DenseDecoder dec(m);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const auto row = dec.step(tokens[t]);
        const auto expected = full.logits.row(t);
        for (std::size_t i = 0; i < row.size(); ++i) EXPECT_NEAR(row[i], expected[i], 1e-5);
    }
    EXPECT_EQ(dec.position(), 20);
}

TEST(GoldenLogits, DeskModelChecksum) {
    const std::string path = std::string(MOEND_TEST_DATA_DIR) + "/golden_logits.json";
    const ModelSpec spec;
    const ToyModel m(spec);
    const auto prompt = calibration_prompt(spec);
    const auto sum = logits_checksum(m.forward_full(prompt).logits);
    if (const char* regen = std::getenv("MOEND_REGEN_GOLDEN"); regen && std::string(regen) == "1") {
        // Frozen from the double-precision reference, not the model under test.
        double ref_sum = 0.0, ref_l2 = 0.0;
        for (const auto& row : testing::reference_forward(m, prompt).logits) {
            for (double x : row) {
                ref_sum += x;
                ref_l2 += x * x;
            }
        }
        nlohmann::json j = {{"model_spec_hash", spec.hash()}, {"model_spec", spec}, {"prompt", prompt},
                            {"checksum", {{"sum", ref_sum}, {"l2", std::sqrt(ref_l2)}}}};
        std::ofstream(path) << j.dump(2) << '\n';
        GTEST_SKIP() << "regenerated " << path;
    }
    std::ifstream in(path);
    ASSERT_TRUE(in) << "missing " << path;
    const auto j = nlohmann::json::parse(in);
    EXPECT_EQ(j.at("model_spec_hash").get<std::string>(), spec.hash());
    EXPECT_EQ(j.at("prompt").get<std::vector<TokenId>>(), prompt);
    const double gsum = j.at("checksum").at("sum").get<double>();
    const double gl2 = j.at("checksum").at("l2").get<double>();
    EXPECT_NEAR(sum.sum, gsum, 1e-4 * std::max(1.0, std::abs(gsum)));
    EXPECT_NEAR(sum.l2, gl2, 1e-4 * gl2);
}

}  // namespace
}  // namespace moend
