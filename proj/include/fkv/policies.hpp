// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fkv/error.hpp"
#include "fkv/golden.hpp"
#include "fkv/kv_cache.hpp"
#include "fkv/numerics.hpp"
#include "fkv/scorer.hpp"

namespace fkv {

using ScoreVector = Vector;

enum class SamplingMode { sample, greedy };

/**
 * Eviction draw. `candidates` are eligible indices ordered by ascending score (older first on
 * ties); `drawn` are positions inside `candidates`, in draw order.
 */
struct EvictionAction {
    std::vector<std::size_t> candidates;
    std::vector<std::size_t> drawn;
    double logprob = 0.0;

    /// Evicted eligible indices in draw order.
    std::vector<std::size_t> evicted() const
    {
        std::vector<std::size_t> out;
        for (auto d : drawn) {
            out.push_back(candidates[d]);
        }
        return out;
    }
};

/// H2O: cumulative attention S_n, averaged over the group's heads.
inline ScoreVector h2o_scores(const GroupCache& cache, std::size_t eligible)
{
    require(eligible <= cache.size(), "h2o_scores: eligible exceeds cache size");
    ScoreVector phi(eligible, 0.0);
    for (std::size_t n = 0; n < eligible; ++n) {
        for (std::size_t h = 0; h < cache.heads(); ++h) {
            phi[n] += cache.cum_score(n, h);
        }
        phi[n] /= static_cast<double>(cache.heads());
    }
    return phi;
}

/// SnapKV (decoding form): mean attention over the last min(window, seen) queries and the group's heads.
inline ScoreVector snapkv_scores(const GroupCache& cache, std::size_t eligible, std::size_t window = 8)
{
    require(eligible <= cache.size(), "snapkv_scores: eligible exceeds cache size");
    require(cache.queries_seen() >= 1, "snapkv_scores: no recent attention rows");
    const auto rows = static_cast<std::size_t>(std::min<std::int64_t>(static_cast<std::int64_t>(window), cache.queries_seen()));
    ScoreVector phi(eligible, 0.0);
    for (std::size_t n = 0; n < eligible; ++n) {
        for (std::size_t h = 0; h < cache.heads(); ++h) {
            phi[n] += cache.window_sum(n, h, rows);
        }
        phi[n] /= static_cast<double>(rows * cache.heads());
    }
    return phi;
}

/// Min-max normalization to [0, 1]; a constant vector maps to zeros.
inline Vector normalize01(std::span<const double> v)
{
    Vector out(v.begin(), v.end());
    if (v.empty()) {
        return out;
    }
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double range = *hi - *lo;
    for (double& x : out) {
        x = range > 0.0 ? (x - *lo) / range : 0.0;
    }
    return out;
}

/// Key diversity: 1 - max cosine similarity to any other key in the set.
inline Vector key_diversity(std::span<const Vector> keys)
{
    require(keys.size() >= 2, "key_diversity: need at least 2 keys");
    Vector div(keys.size(), 0.0);
    for (std::size_t n = 0; n < keys.size(); ++n) {
        double best = -1.0;
        for (std::size_t m = 0; m < keys.size(); ++m) {
            if (m != n) {
                best = std::max(best, cosine_similarity(keys[n], keys[m]));
            }
        }
        div[n] = 1.0 - best;
    }
    return div;
}

/// R-KV: attention_weight * norm01(window score) + (1 - attention_weight) * norm01(diversity).
inline ScoreVector rkv_scores(std::span<const double> window_scores, std::span<const Vector> keys,
                              double attention_weight = 0.1)
{
    require(window_scores.size() == keys.size(), "rkv_scores: score/key count mismatch");
    if (keys.size() < 2) {
        throw Error(ErrorKind::invalid_argument, "rkv_scores: need at least 2 eligible entries");
    }
    const Vector a = normalize01(window_scores);
    const Vector d = normalize01(key_diversity(keys));
    ScoreVector phi(keys.size());
    for (std::size_t n = 0; n < keys.size(); ++n) {
        phi[n] = attention_weight * a[n] + (1.0 - attention_weight) * d[n];
    }
    return phi;
}

inline ScoreVector rkv_scores(const GroupCache& cache, std::size_t eligible, std::size_t window = 8,
                              double attention_weight = 0.1)
{
    std::vector<Vector> keys;
    for (std::size_t n = 0; n < eligible; ++n) {
        const auto k = cache.key(n);
        keys.emplace_back(k.begin(), k.end());
    }
    return rkv_scores(snapkv_scores(cache, eligible, window), keys, attention_weight);
}

inline ScoreVector learned_scores(const ScorerParams& scorer, const Matrix& features)
{
    return score_rows(scorer, features);
}

/// Candidate order: ascending score, older (lower index) first on ties.
inline std::vector<std::size_t> candidate_order(std::span<const double> phi)
{
    std::vector<std::size_t> idx(phi.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return phi[a] < phi[b]; });
    return idx;
}

namespace detail {

/// Sequential draw probabilities softmax(-phi) over the not-yet-drawn candidates.
inline Vector remaining_probs(std::span<const double> cand_phi, const std::vector<char>& taken)
{
    std::vector<double> logits;
    std::vector<std::size_t> map;
    for (std::size_t i = 0; i < cand_phi.size(); ++i) {
        if (!taken[i]) {
            logits.push_back(-cand_phi[i]);
            map.push_back(i);
        }
    }
    const Vector p = stable_softmax(logits);
    Vector full(cand_phi.size(), 0.0);
    for (std::size_t i = 0; i < map.size(); ++i) {
        full[map[i]] = p[i];
    }
    return full;
}

}  // namespace detail

/// log P(drawn order) under sequential softmax(-phi) draws without replacement; phi is per candidate.
inline double log_prob_of_draws(std::span<const double> cand_phi, std::span<const std::size_t> drawn)
{
    std::vector<char> taken(cand_phi.size(), 0);
    double lp = 0.0;
    for (auto d : drawn) {
        require(d < cand_phi.size(), "log_prob_of_action: drawn index outside the candidate set");
        require(!taken[d], "log_prob_of_action: candidate drawn twice");
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < cand_phi.size(); ++i) {
            if (!taken[i]) {
                mx = std::max(mx, -cand_phi[i]);
            }
        }
        double z = 0.0;
        for (std::size_t i = 0; i < cand_phi.size(); ++i) {
            if (!taken[i]) {
                z += std::exp(-cand_phi[i] - mx);
            }
        }
        lp += -cand_phi[d] - mx - std::log(z);
        taken[d] = 1;
    }
    return lp;
}

/// Log-probability of a stored action under eligible-set scores `phi`; the candidate set comes from the action.
inline double log_prob_of_action(std::span<const double> phi, const EvictionAction& action)
{
    std::vector<double> cand;
    for (auto c : action.candidates) {
        require(c < phi.size(), "log_prob_of_action: candidate index outside the eligible set");
        cand.push_back(phi[c]);
    }
    return log_prob_of_draws(cand, action.drawn);
}

/**
 * Top-(multiplier * L) lowest-score candidates, then L sequential draws without replacement
 * from softmax(-phi). Greedy mode evicts the L lowest. multiplier <= 0 uses every eligible entry.
 */
inline EvictionAction sample_eviction(std::span<const double> phi, std::size_t L, RandomStream& rng,
                                      SamplingMode mode = SamplingMode::sample, std::int64_t candidate_multiplier = 2)
{
    if (phi.size() < L) {
        throw Error(ErrorKind::invalid_argument, "sample_eviction: fewer eligible entries than evictions");
    }
    for (double v : phi) {
        require(std::isfinite(v), "sample_eviction: non-finite score");
    }
    const std::vector<std::size_t> order = candidate_order(phi);
    std::size_t k = candidate_multiplier <= 0 ? phi.size() : static_cast<std::size_t>(candidate_multiplier) * L;
    k = std::min(k, phi.size());
    EvictionAction a;
    a.candidates.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    std::vector<double> cand_phi;
    for (auto c : a.candidates) {
        cand_phi.push_back(phi[c]);
    }
    if (mode == SamplingMode::greedy) {
        for (std::size_t i = 0; i < L; ++i) {
            a.drawn.push_back(i);
        }
    } else {
        std::vector<char> taken(k, 0);
        for (std::size_t i = 0; i < L; ++i) {
            const Vector p = detail::remaining_probs(cand_phi, taken);
            const std::size_t d = draw_categorical(p, rng.uniform());
            a.drawn.push_back(d);
            taken[d] = 1;
        }
    }
    a.logprob = log_prob_of_draws(cand_phi, a.drawn);
    return a;
}

/// Complement of the evicted indices within [0, eligible), ascending.
inline std::vector<std::size_t> keep_from_evicted(std::size_t eligible, std::span<const std::size_t> evicted)
{
    std::vector<char> ev(eligible, 0);
    for (auto e : evicted) {
        ev[e] = 1;
    }
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < eligible; ++i) {
        if (!ev[i]) {
            keep.push_back(i);
        }
    }
    return keep;
}

// ---------------------------------------------------------------------------------------------
// Policy interface used by the streaming runner.

struct EvictionContext {
    std::size_t layer = 0;
    std::size_t group = 0;
    std::int64_t step = 0;  // 1-based eviction step
    const GroupCache* cache = nullptr;
    EvictionSchedule schedule;
};

struct EvictionDecision {
    std::vector<std::size_t> keep;  // eligible indices, ascending
    ScoreVector scores;             // per eligible entry
    std::optional<EvictionAction> action;
    Matrix candidate_features;      // rows aligned with action->candidates (learned policy only)
};

class EvictionPolicy {
public:
    virtual ~EvictionPolicy() = default;
    virtual std::string name() const = 0;
    virtual EvictionDecision decide(const EvictionContext& ctx, RandomStream& rng) const = 0;
};

namespace detail {

inline EvictionDecision greedy_decision(ScoreVector scores, const EvictionSchedule& s)
{
    EvictionDecision d;
    RandomStream unused;
    const EvictionAction a = sample_eviction(scores, static_cast<std::size_t>(s.eviction_length), unused,
                                             SamplingMode::greedy, 0);
    const auto ev = a.evicted();
    d.keep = keep_from_evicted(scores.size(), ev);
    d.scores = std::move(scores);
    return d;
}

}  // namespace detail

class H2OPolicy final : public EvictionPolicy {
public:
    std::string name() const override { return "h2o"; }
    EvictionDecision decide(const EvictionContext& ctx, RandomStream&) const override
    {
        return detail::greedy_decision(h2o_scores(*ctx.cache, static_cast<std::size_t>(ctx.schedule.budget)),
                                       ctx.schedule);
    }
};

class SnapKVPolicy final : public EvictionPolicy {
public:
    explicit SnapKVPolicy(std::size_t window = 8) : window_(window) {}
    std::string name() const override { return "snapkv"; }
    EvictionDecision decide(const EvictionContext& ctx, RandomStream&) const override
    {
        return detail::greedy_decision(
            snapkv_scores(*ctx.cache, static_cast<std::size_t>(ctx.schedule.budget), window_), ctx.schedule);
    }

private:
    std::size_t window_;
};

class RKVPolicy final : public EvictionPolicy {
public:
    RKVPolicy(std::size_t window = 8, double attention_weight = 0.1) : window_(window), weight_(attention_weight) {}
    std::string name() const override { return "rkv"; }
    EvictionDecision decide(const EvictionContext& ctx, RandomStream&) const override
    {
        return detail::greedy_decision(
            rkv_scores(*ctx.cache, static_cast<std::size_t>(ctx.schedule.budget), window_, weight_), ctx.schedule);
    }

private:
    std::size_t window_;
    double weight_;
};

/// Golden oracle as a policy: scores are future scores alpha from full attention.
class GoldenPolicy final : public EvictionPolicy {
public:
    /// `future[layer * groups + group]` is the future-score table (M x T) of that group.
    GoldenPolicy(std::vector<Matrix> future, std::size_t groups) : future_(std::move(future)), groups_(groups) {}
    std::string name() const override { return "golden"; }
    EvictionDecision decide(const EvictionContext& ctx, RandomStream&) const override
    {
        const Matrix& table = future_[ctx.layer * groups_ + ctx.group];
        const auto eligible = static_cast<std::size_t>(ctx.schedule.budget);
        ScoreVector alpha(eligible, 0.0);
        // A trailing trigger at the last token has no future block: every alpha is 0.
        if (ctx.step >= 1 && ctx.step <= static_cast<std::int64_t>(table.rows)) {
            const auto row = table.row(static_cast<std::size_t>(ctx.step - 1));
            for (std::size_t n = 0; n < eligible; ++n) {
                alpha[n] = row[static_cast<std::size_t>(ctx.cache->positions()[n])];
            }
        }
        return detail::greedy_decision(std::move(alpha), ctx.schedule);
    }

private:
    std::vector<Matrix> future_;
    std::size_t groups_;
};

/// Golden policy backed by the future-score tables of one full forward.
inline GoldenPolicy make_golden_policy(const ForwardOutput& fwd, const ModelConfig& c, const EvictionSchedule& s)
{
    std::vector<Matrix> tables;
    for (std::size_t l = 0; l < static_cast<std::size_t>(c.layers); ++l) {
        for (std::size_t g = 0; g < static_cast<std::size_t>(c.kv_heads); ++g) {
            tables.push_back(future_score_table(group_block_scores(fwd, c, l, g, s)));
        }
    }
    return GoldenPolicy(std::move(tables), static_cast<std::size_t>(c.kv_heads));
}

struct LearnedPolicyOptions {
    SamplingMode mode = SamplingMode::sample;
    std::int64_t candidate_multiplier = 2;
    FeatureOptions features;
};

class LearnedPolicy final : public EvictionPolicy {
public:
    LearnedPolicy(const ScorerSet* scorers, LearnedPolicyOptions opt, std::string label = "learned")
        : scorers_(scorers), opt_(opt), label_(std::move(label))
    {
    }
    std::string name() const override { return label_; }
    EvictionDecision decide(const EvictionContext& ctx, RandomStream& rng) const override
    {
        const auto eligible = static_cast<std::size_t>(ctx.schedule.budget);
        const Matrix feats = extract_features(*ctx.cache, eligible, ctx.schedule.eviction_length, opt_.features);
        EvictionDecision d;
        d.scores = learned_scores(scorers_->at(ctx.layer, ctx.group), feats);
        EvictionAction a = sample_eviction(d.scores, static_cast<std::size_t>(ctx.schedule.eviction_length), rng,
                                           opt_.mode, opt_.candidate_multiplier);
        d.keep = keep_from_evicted(eligible, a.evicted());
        d.candidate_features = Matrix(a.candidates.size(), feats.cols);
        for (std::size_t i = 0; i < a.candidates.size(); ++i) {
            const auto src = feats.row(a.candidates[i]);
            std::copy(src.begin(), src.end(), d.candidate_features.row(i).begin());
        }
        d.action = std::move(a);
        return d;
    }

private:
    const ScorerSet* scorers_;
    LearnedPolicyOptions opt_;
    std::string label_;
};

}  // namespace fkv
