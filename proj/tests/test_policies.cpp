// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include <gtest/gtest.h>

#include "fkv/policies.hpp"

using namespace fkv;

namespace {

struct Recorded {
    GroupCache cache;
    std::vector<std::vector<std::vector<double>>> rows;  // [query][head][entry]
};

// A cache of n entries that has seen `queries` random attention rows per head.
Recorded recorded_cache(std::size_t n, std::size_t heads, std::size_t queries, std::uint64_t seed, std::size_t D = 3)
{
    Recorded r{GroupCache(D, heads, 32), {}};
    RandomStream rng(seed, 5);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> k(D), v(D);
        for (auto& x : k) {
            x = rng.normal();
        }
        for (auto& x : v) {
            x = rng.normal();
        }
        r.cache.append(k, v, static_cast<std::int64_t>(i));
    }
    for (std::size_t q = 0; q < queries; ++q) {
        std::vector<std::vector<double>> per_head(heads);
        std::vector<std::span<const double>> spans;
        for (auto& row : per_head) {
            std::vector<double> logit(n);
            for (auto& x : logit) {
                x = 2.0 * rng.normal();
            }
            row = stable_softmax(logit);
        }
        for (const auto& row : per_head) {
            spans.push_back(row);
        }
        r.cache.record_query(static_cast<std::int64_t>(q), spans);
        if (q % 4 == 3) {
            r.cache.close_chunk(0.9);
        }
        r.rows.push_back(per_head);
    }
    r.cache.close_chunk(0.9);
    return r;
}

double prob_of_order(const std::vector<double>& cand_phi, const std::vector<std::size_t>& order)
{
    std::vector<char> taken(cand_phi.size(), 0);
    double p = 1.0;
    for (auto d : order) {
        double z = 0.0;
        for (std::size_t i = 0; i < cand_phi.size(); ++i) {
            z += taken[i] ? 0.0 : std::exp(-cand_phi[i]);
        }
        p *= std::exp(-cand_phi[d]) / z;
        taken[d] = 1;
    }
    return p;
}

EvictionAction action_over(std::size_t k, std::vector<std::size_t> drawn)
{
    EvictionAction a;
    for (std::size_t i = 0; i < k; ++i) {
        a.candidates.push_back(i);
    }
    a.drawn = std::move(drawn);
    return a;
}

}  // namespace

TEST(H2O, NeverAttendedIsZero)
{
    GroupCache c(2, 2, 8);
    std::vector<double> k{1.0, 0.0};
    c.append(k, k, 0);
    c.append(k, k, 1);
    EXPECT_EQ(h2o_scores(c, 2), (ScoreVector{0.0, 0.0}));
}

TEST(H2O, MatchesColumnSums)
{
    const auto r = recorded_cache(10, 2, 30, 1);
    const auto phi = h2o_scores(r.cache, 8);
    for (std::size_t n = 0; n < 8; ++n) {
        double ref = 0.0;
        for (const auto& q : r.rows) {
            for (const auto& h : q) {
                ref += h[n];
            }
        }
        EXPECT_NEAR(phi[n], ref / 2.0, 1e-12);
    }
}

TEST(H2O, HigherCumulativeSurvives)
{
    GroupCache c(1, 1, 8);
    std::vector<double> k{1.0};
    c.append(k, k, 0);
    c.append(k, k, 1);
    c.add_chunk(0, 0, 0.2);
    c.add_chunk(1, 0, 0.7);
    c.close_chunk(0.9);
    RandomStream rng;
    const auto a = sample_eviction(h2o_scores(c, 2), 1, rng, SamplingMode::greedy, 2);
    EXPECT_EQ(a.evicted(), (std::vector<std::size_t>{0}));
}

TEST(SnapKV, UniformRecentAttention)
{
    const std::size_t n = 5;
    GroupCache c(1, 1, 32);
    std::vector<double> k{1.0};
    for (std::size_t i = 0; i < n; ++i) {
        c.append(k, k, static_cast<std::int64_t>(i));
    }
    std::vector<double> row(n, 1.0 / n);
    std::vector<std::span<const double>> rows{row};
    for (std::int64_t q = 0; q < 12; ++q) {
        c.record_query(q, rows);
    }
    for (double v : snapkv_scores(c, n)) {
        EXPECT_NEAR(v, 1.0 / n, 1e-15);
    }
}

TEST(SnapKV, HistoricOnlyMassScoresZero)
{
    GroupCache c(1, 1, 32);
    std::vector<double> k{1.0};
    c.append(k, k, 0);
    c.append(k, k, 1);
    const std::vector<double> old{1.0, 0.0}, now{0.0, 1.0};
    for (std::int64_t q = 0; q < 20; ++q) {
        std::vector<std::span<const double>> rows{q < 12 ? std::span<const double>(old) : std::span<const double>(now)};
        c.record_query(q, rows);
    }
    c.close_chunk(0.9);
    EXPECT_EQ(snapkv_scores(c, 2)[0], 0.0);
    EXPECT_GT(h2o_scores(c, 2)[0], 10.0);
}

TEST(SnapKV, MatchesWindowMean)
{
    const auto r = recorded_cache(9, 3, 20, 2);
    const auto phi = snapkv_scores(r.cache, 9, 8);
    for (std::size_t n = 0; n < 9; ++n) {
        double ref = 0.0;
        for (std::size_t q = r.rows.size() - 8; q < r.rows.size(); ++q) {
            for (const auto& h : r.rows[q]) {
                ref += h[n];
            }
        }
        EXPECT_NEAR(phi[n], ref / 24.0, 1e-12);
    }
    const auto few = recorded_cache(4, 1, 3, 3);
    const auto p3 = snapkv_scores(few.cache, 4, 8);
    for (std::size_t n = 0; n < 4; ++n) {
        EXPECT_NEAR(p3[n], (few.rows[0][0][n] + few.rows[1][0][n] + few.rows[2][0][n]) / 3.0, 1e-12);
    }
}

TEST(RKV, DuplicatedKeysHaveZeroDiversity)
{
    const std::vector<Vector> keys{{1.0, 2.0}, {1.0, 2.0}, {0.0, 1.0}, {-1.0, 0.3}};
    const auto d = key_diversity(keys);
    EXPECT_NEAR(d[0], 0.0, 1e-15);
    EXPECT_NEAR(d[1], 0.0, 1e-15);
    EXPECT_GT(d[3], 0.0);
}

TEST(RKV, OrthogonalKeysEqualWindowScoresTie)
{
    const std::vector<Vector> keys{{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}};
    const auto phi = rkv_scores(std::vector<double>{0.3, 0.3, 0.3}, keys);
    EXPECT_EQ(phi[0], phi[1]);
    EXPECT_EQ(phi[1], phi[2]);
    EXPECT_THROW(rkv_scores(std::vector<double>{0.3}, std::vector<Vector>{{1.0}}), Error);
}

TEST(RKV, MatchesWeightedFormula)
{
    RandomStream r(4, 4);
    std::vector<Vector> keys(8, Vector(4));
    std::vector<double> w(8);
    for (std::size_t n = 0; n < 8; ++n) {
        for (auto& x : keys[n]) {
            x = r.normal();
        }
        w[n] = r.uniform();
    }
    const auto phi = rkv_scores(w, keys, 0.1);
    std::vector<double> div(8);
    for (std::size_t n = 0; n < 8; ++n) {
        double best = -2.0;
        for (std::size_t m = 0; m < 8; ++m) {
            if (m == n) {
                continue;
            }
            double dot = 0.0, a = 0.0, b = 0.0;
            for (std::size_t d = 0; d < 4; ++d) {
                dot += keys[n][d] * keys[m][d];
                a += keys[n][d] * keys[n][d];
                b += keys[m][d] * keys[m][d];
            }
            best = std::max(best, dot / std::sqrt(a * b));
        }
        div[n] = 1.0 - best;
    }
    const auto [wl, wh] = std::minmax_element(w.begin(), w.end());
    const auto [dl, dh] = std::minmax_element(div.begin(), div.end());
    for (std::size_t n = 0; n < 8; ++n) {
        const double ref = 0.1 * (w[n] - *wl) / (*wh - *wl) + 0.9 * (div[n] - *dl) / (*dh - *dl);
        EXPECT_NEAR(phi[n], ref, 1e-12);
    }
}

TEST(Sampling, GreedyEvictsArgmin)
{
    RandomStream rng;
    const auto a = sample_eviction(std::vector<double>{3.0, 1.0, 2.0, 4.0}, 1, rng, SamplingMode::greedy, 2);
    EXPECT_EQ(a.evicted(), (std::vector<std::size_t>{1}));
    EXPECT_EQ(a.candidates, (std::vector<std::size_t>{1, 2}));
}

TEST(Sampling, EqualPairIsFairCoin)
{
    EXPECT_NEAR(log_prob_of_draws(std::vector<double>{0.7, 0.7}, std::vector<std::size_t>{0}), std::log(0.5), 1e-15);
    RandomStream rng(1, 1);
    int first = 0;
    for (int i = 0; i < 20000; ++i) {
        const auto a = sample_eviction(std::vector<double>{0.7, 0.7}, 1, rng);
        EXPECT_NEAR(a.logprob, std::log(0.5), 1e-15);
        first += a.evicted()[0] == 0 ? 1 : 0;
    }
    EXPECT_NEAR(first, 10000, 3 * std::sqrt(20000 * 0.25));
}

TEST(Sampling, FrequenciesMatchSoftmaxOfNegatedScores)
{
    const std::vector<double> phi{0.0, std::log(3.0)};
    const int n = 100000;
    RandomStream rng(2, 2);
    int zero = 0;
    for (int i = 0; i < n; ++i) {
        zero += sample_eviction(phi, 1, rng).evicted()[0] == 0 ? 1 : 0;
    }
    EXPECT_NEAR(std::exp(log_prob_of_draws(phi, std::vector<std::size_t>{0})), 0.75, 1e-15);
    EXPECT_NEAR(zero, 0.75 * n, 3 * std::sqrt(n * 0.75 * 0.25));
}

TEST(Sampling, SingleDrawProbabilitiesSumToOne)
{
    RandomStream r(3, 3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> phi(2 + r.below(10));
        for (auto& x : phi) {
            x = 5.0 * r.normal();
        }
        double sum = 0.0;
        for (std::size_t i = 0; i < phi.size(); ++i) {
            sum += std::exp(log_prob_of_action(phi, action_over(phi.size(), {i})));
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
}

TEST(Sampling, TwoDrawsMatchEnumeration)
{
    const std::vector<double> phi{0.3, -0.2, 1.1, 0.5};
    double total = 0.0;
    for (std::size_t a = 0; a < 4; ++a) {
        for (std::size_t b = 0; b < 4; ++b) {
            if (a == b) {
                continue;
            }
            const double ref = prob_of_order(phi, {a, b});
            const double got = std::exp(log_prob_of_draws(phi, std::vector<std::size_t>{a, b}));
            EXPECT_NEAR(got, ref, 1e-14);
            total += got;
        }
    }
    EXPECT_NEAR(total, 1.0, 1e-12);

    // Empirical ordered-pair frequencies from the sampler.
    std::map<std::pair<std::size_t, std::size_t>, int> counts;
    RandomStream rng(4, 4);
    const int n = 60000;
    for (int i = 0; i < n; ++i) {
        const auto act = sample_eviction(phi, 2, rng, SamplingMode::sample, 2);
        ASSERT_EQ(act.candidates.size(), 4u);
        const auto ev = act.evicted();
        ++counts[{ev[0], ev[1]}];
    }
    for (const auto& [key, c] : counts) {
        const double p = prob_of_order(phi, {key.first, key.second});
        EXPECT_NEAR(c, p * n, 4 * std::sqrt(n * p * (1 - p)) + 1);
    }
}

TEST(Sampling, StoredLogprobReplaysBitwise)
{
    RandomStream r(5, 5);
    std::vector<double> phi(12);
    for (auto& x : phi) {
        x = r.normal();
    }
    RandomStream a(9, 9), b(9, 9);
    const auto x = sample_eviction(phi, 3, a);
    const auto y = sample_eviction(phi, 3, b);
    EXPECT_EQ(x.drawn, y.drawn);
    EXPECT_EQ(x.candidates, y.candidates);
    EXPECT_EQ(log_prob_of_action(phi, x), x.logprob);
    EXPECT_EQ(x.candidates.size(), 6u);
}

TEST(Sampling, ShiftInvariance)
{
    RandomStream r(6, 6);
    std::vector<double> phi(10);
    for (auto& x : phi) {
        x = r.normal();
    }
    std::vector<double> shifted = phi;
    for (auto& x : shifted) {
        x += 3.5;
    }
    RandomStream g;
    EXPECT_EQ(sample_eviction(phi, 2, g, SamplingMode::greedy).drawn,
              sample_eviction(shifted, 2, g, SamplingMode::greedy).drawn);
    RandomStream a(1, 2), b(1, 2);
    const auto x = sample_eviction(phi, 2, a);
    const auto y = sample_eviction(shifted, 2, b);
    EXPECT_EQ(x.candidates, y.candidates);
    EXPECT_NEAR(x.logprob, log_prob_of_action(shifted, x), 1e-12);
}

TEST(Sampling, DegenerateEligibleSet)
{
    RandomStream rng(7, 7);
    const auto a = sample_eviction(std::vector<double>{0.1, 0.4, 0.2}, 2, rng);
    EXPECT_EQ(a.candidates.size(), 3u);
    EXPECT_EQ(a.drawn.size(), 2u);
    EXPECT_THROW(sample_eviction(std::vector<double>{0.1}, 2, rng), Error);
    EXPECT_THROW(sample_eviction(std::vector<double>{0.1, NAN}, 1, rng), Error);
}

TEST(Sampling, StoredActionMismatchThrows)
{
    const std::vector<double> phi{0.1, 0.2};
    EXPECT_THROW(log_prob_of_action(phi, action_over(3, {0})), Error);
    EXPECT_THROW(log_prob_of_draws(phi, std::vector<std::size_t>{0, 0}), Error);
}

TEST(Policies, KeepSetsHaveExactSize)
{
    const EvictionSchedule s{8, 2};
    auto r = recorded_cache(10, 2, 20, 8, 4);
    RandomStream rng(1, 1);
    const H2OPolicy h2o;
    const SnapKVPolicy snap;
    const RKVPolicy rkv;
    ScorerSet sc = init_scorer_set(1, 1, feature_dim(4, 2), 4, 3);
    const LearnedPolicy greedy(&sc, LearnedPolicyOptions{SamplingMode::greedy, 2, {}});
    const LearnedPolicy sample(&sc, LearnedPolicyOptions{SamplingMode::sample, 2, {}});
    for (const EvictionPolicy* p : std::vector<const EvictionPolicy*>{&h2o, &snap, &rkv, &greedy, &sample}) {
        const EvictionContext ctx{0, 0, 1, &r.cache, s};
        const auto d = p->decide(ctx, rng);
        EXPECT_EQ(d.keep.size(), 6u) << p->name();
        EXPECT_TRUE(std::is_sorted(d.keep.begin(), d.keep.end()));
        EXPECT_EQ(d.scores.size(), 8u);
        EXPECT_LT(d.keep.back(), 8u);
    }
    const auto hd = h2o.decide(EvictionContext{0, 0, 1, &r.cache, s}, rng);
    const auto phi = h2o_scores(r.cache, 8);
    const auto order = candidate_order(phi);
    EXPECT_EQ(keep_from_evicted(8, std::vector<std::size_t>{order[0], order[1]}), hd.keep);

    const auto ld = sample.decide(EvictionContext{0, 0, 1, &r.cache, s}, rng);
    ASSERT_TRUE(ld.action.has_value());
    EXPECT_EQ(ld.candidate_features.rows, ld.action->candidates.size());
    const Matrix x = extract_features(r.cache, 8, 2);
    EXPECT_EQ(ld.scores, score_rows(sc.at(0, 0), x));
}
