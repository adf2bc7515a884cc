// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "moend/errors.hpp"
#include "moend/eviction.hpp"
#include "test_util.hpp"

namespace moend {
namespace {

using namespace eviction;

// Sort-based oracle: indices ordered by (score desc, index asc), first n, ascending.
std::vector<std::size_t> top_oracle(const std::vector<double>& s, std::size_t n) {
    std::vector<std::pair<double, std::size_t>> v;
    for (std::size_t i = 0; i < s.size(); ++i) v.push_back({-s[i], i});
    std::sort(v.begin(), v.end());
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(v[i].second);
    std::sort(out.begin(), out.end());
    return out;
}

TEST(Scorers, ParseNames) {
    for (auto k : {ScorerKind::kAttnAccum, ScorerKind::kTrig, ScorerKind::kRandomPerm}) {
        EXPECT_EQ(parse_scorer(scorer_name(k)), k);
    }
    EXPECT_THROW(parse_scorer("h2o"), ConfigError);
}

TEST(AttentionAccumulation, SingleStepEqualsRow) {
    const std::vector<std::vector<float>> h = {{0.1f, 0.7f, 0.2f}};
    const auto s = score_attention_accumulation(h);
    ASSERT_EQ(s.size(), 3u);
    EXPECT_DOUBLE_EQ(s.scores[1], 0.7f);
    EXPECT_EQ(s.kind, ScorerKind::kAttnAccum);
}

TEST(AttentionAccumulation, FiveTokenHandCase) {
    const std::vector<std::vector<float>> h = {
        {0.5f, 0.5f, 0.0f, 0.0f, 0.0f},
        {0.2f, 0.3f, 0.0f, 0.5f, 0.0f},
        {0.1f, 0.1f, 0.0f, 0.4f, 0.4f},
    };
    const auto s = score_attention_accumulation(h);
    const std::vector<double> expected = {0.8, 0.9, 0.0, 0.9, 0.4};
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(s.scores[j], expected[j], 1e-7);
    EXPECT_EQ(s.scores[2], 0.0);
    EXPECT_THROW(score_attention_accumulation({}), InputError);
}

TEST(AttentionAccumulation, IncrementalMatchesBatch) {
    AttentionAccumulator acc;
    std::vector<std::vector<float>> rows;
    std::mt19937 rng(3);
    for (std::size_t len = 1; len <= 6; ++len) {
        acc.resize(len);
        std::vector<float> r(len);
        for (auto& x : r) x = std::uniform_real_distribution<float>(0, 1)(rng);
        acc.add(r);
        r.resize(6, 0.0f);
        rows.push_back(r);
    }
    const auto batch = score_attention_accumulation(rows);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_DOUBLE_EQ(acc.scores().scores[j], batch.scores[j]);
    const std::vector<std::size_t> keep = {1, 4};
    acc.retain(keep);
    EXPECT_EQ(acc.size(), 2u);
    EXPECT_DOUBLE_EQ(acc.scores().scores[1], batch.scores[4]);
}

TEST(Trigonometric, AlignedAndOrthogonal) {
    Tensor keys({1, 3, 2}, std::vector<float>{2, 0, 0, 3, 0, 0});
    const std::vector<float> q = {1.0f, 0.0f};
    const auto s = score_trigonometric(keys, q);
    EXPECT_DOUBLE_EQ(s.scores[0], 1.0);
    EXPECT_DOUBLE_EQ(s.scores[1], 0.0);
    EXPECT_DOUBLE_EQ(s.scores[2], 0.0);  // zero-norm key
}

TEST(Trigonometric, EightTokenRankingMatchesBruteForce) {
    const Tensor keys = testing::random_tensor({2, 8, 4}, 21);
    const std::vector<float> q = {0.3f, -1.2f, 0.8f, 0.1f};
    const auto s = score_trigonometric(keys, q);
    std::vector<double> oracle(8);
    for (std::size_t t = 0; t < 8; ++t) {
        double dot = 0, kk = 0, qq = 0;
        for (std::size_t j = 0; j < 4; ++j) {
            const double k = (keys.at(0, t, j) + keys.at(1, t, j)) / 2.0;
            dot += k * q[j];
            kk += k * k;
            qq += double(q[j]) * q[j];
        }
        oracle[t] = std::abs(dot) / std::sqrt(kk * qq);
    }
    for (std::size_t t = 0; t < 8; ++t) EXPECT_NEAR(s.scores[t], oracle[t], 1e-9);
    EXPECT_EQ(select_top(s.scores, 3), top_oracle(oracle, 3));
}

TEST(RandomPermutation, SeededAndAPermutation) {
    const auto a = score_random_permutation(20, 1);
    EXPECT_EQ(a.scores, score_random_permutation(20, 1).scores);
    EXPECT_NE(a.scores, score_random_permutation(20, 2).scores);
    auto sorted = a.scores;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(sorted[i], static_cast<double>(i));
    EXPECT_EQ(score_random_permutation(1, 9).size(), 1u);
}

TEST(SelectRetained, KeepAllPreservesOrder) {
    const auto s = score_random_permutation(10, 4);
    const auto r = select_retained(s, KeepRatio(1.0), 10);
    std::vector<std::size_t> all(10);
    std::iota(all.begin(), all.end(), 0);
    EXPECT_EQ(r.indices, all);
}

TEST(SelectRetained, TiesGoToLowerIndex) {
    const ImportanceScores s{{1.0, 1.0, 1.0, 1.0}, ScorerKind::kTrig};
    EXPECT_EQ(select_retained(s, KeepRatio(0.5), 4).indices, (std::vector<std::size_t>{0, 1}));
}

TEST(SelectRetained, MatchesSortOracle) {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> s(16);
        // small integer range forces plenty of ties
        for (auto& x : s) x = static_cast<double>(rng() % 6);
        for (double keep : {0.1, 0.25, 0.5, 0.75, 0.9}) {
            const auto r = select_retained({s, ScorerKind::kAttnAccum}, KeepRatio(keep), 16);
            EXPECT_EQ(r.indices, top_oracle(s, retention_count(KeepRatio(keep), 16)));
        }
    }
}

TEST(SelectRetained, PermutationEquivariantWithoutTies) {
    std::mt19937_64 rng(5);
    const auto base = score_random_permutation(12, 77).scores;
    std::vector<std::size_t> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> permuted(12);
    for (std::size_t i = 0; i < 12; ++i) permuted[perm[i]] = base[i];
    const auto a = select_retained({base, ScorerKind::kRandomPerm}, KeepRatio(0.25), 12).indices;
    auto b = select_retained({permuted, ScorerKind::kRandomPerm}, KeepRatio(0.25), 12).indices;
    std::vector<std::size_t> mapped;
    for (std::size_t i : a) mapped.push_back(perm[i]);
    std::sort(mapped.begin(), mapped.end());
    EXPECT_EQ(mapped, b);
}

TEST(SelectRetained, PositionsAreASubsequence) {
    const std::vector<std::int64_t> pos = {3, 8, 9, 15, 20, 31, 40, 41};
    const auto r = select_retained(score_random_permutation(8, 2), KeepRatio(0.5), 8, pos);
    ASSERT_EQ(r.positions.size(), 4u);
    EXPECT_TRUE(std::is_sorted(r.positions.begin(), r.positions.end()));
    for (std::size_t i = 0; i < r.indices.size(); ++i) EXPECT_EQ(r.positions[i], pos[r.indices[i]]);
    EXPECT_THROW(select_retained(score_random_permutation(7, 2), KeepRatio(0.5), 8), InputError);
}

TEST(RetentionCount, RoundHalfUpWithFloorOne) {
    for (std::size_t T = 1; T < 300; ++T) {
        for (int p : KeepRatio::kLegalPercent) {
            const auto n = retention_count(KeepRatio::from_percent(p), T);
            EXPECT_GE(n, 1u);
            EXPECT_LE(n, T);
            const double exact = p * static_cast<double>(T) / 100.0;
            EXPECT_EQ(n, std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(exact + 0.5))));
        }
    }
    EXPECT_EQ(retention_count(KeepRatio(0.25), 10), 3u);  // 2.5 rounds up
    EXPECT_EQ(retention_count(KeepRatio(0.1), 4), 1u);
}

}  // namespace
}  // namespace moend
