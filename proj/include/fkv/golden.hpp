// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "fkv/error.hpp"
#include "fkv/kv_cache.hpp"
#include "fkv/model.hpp"
#include "fkv/numerics.hpp"

namespace fkv {

/// Number of oracle eviction steps M = ceil((T - B) / L) - 1.
inline std::int64_t golden_step_count(std::int64_t T, const EvictionSchedule& s)
{
    const std::int64_t span = T - s.budget;
    return (span + s.eviction_length - 1) / s.eviction_length - 1;
}

/**
 * Block scores of one KV group. Row t-1 holds block t (t = 1..M): query rows
 * [B + tL, B + (t+1)L - 1], mean-pooled over the valid rows, then over the group's heads.
 */
struct BlockScores {
    std::int64_t seq_len = 0;
    EvictionSchedule schedule;
    Matrix scores;                      // M x T
    std::vector<std::size_t> valid_rows;  // per block

    std::int64_t steps() const { return static_cast<std::int64_t>(scores.rows); }
};

inline BlockScores block_scores(std::span<const PackedAttention* const> group_heads, const EvictionSchedule& s)
{
    s.validate_offline();
    require(!group_heads.empty(), "block_scores: no heads");
    const auto T = static_cast<std::int64_t>(group_heads.front()->size());
    for (const auto* h : group_heads) {
        require(static_cast<std::int64_t>(h->size()) == T, "block_scores: heads disagree on sequence length");
    }
    if (T <= s.trigger_size()) {
        throw Error(ErrorKind::invalid_argument, "no eviction steps: T=" + std::to_string(T) +
                                                      " must exceed B+L=" + std::to_string(s.trigger_size()));
    }
    const std::int64_t M = golden_step_count(T, s);
    BlockScores bs;
    bs.seq_len = T;
    bs.schedule = s;
    bs.scores = Matrix(static_cast<std::size_t>(M), static_cast<std::size_t>(T));
    const double inv_heads = 1.0 / static_cast<double>(group_heads.size());
    for (std::int64_t t = 1; t <= M; ++t) {
        const std::int64_t first = s.budget + t * s.eviction_length;
        const std::int64_t last = std::min(first + s.eviction_length, T) - 1;
        const auto valid = static_cast<std::size_t>(last - first + 1);
        bs.valid_rows.push_back(valid);
        auto out = bs.scores.row(static_cast<std::size_t>(t - 1));
        for (const auto* head : group_heads) {
            Vector pooled(static_cast<std::size_t>(T), 0.0);
            for (std::int64_t q = first; q <= last; ++q) {
                const auto r = head->row(static_cast<std::size_t>(q));
                for (std::size_t j = 0; j < r.size(); ++j) {
                    pooled[j] += r[j];
                }
            }
            for (std::size_t j = 0; j < pooled.size(); ++j) {
                out[j] += pooled[j] / static_cast<double>(valid) * inv_heads;
            }
        }
    }
    return bs;
}

/// Future scores at step t over all T positions: max over block rows t..M.
inline Vector future_scores(const BlockScores& bs, std::int64_t t)
{
    require(t >= 1 && t <= bs.steps(),
            "future_scores: step " + std::to_string(t) + " outside [1, " + std::to_string(bs.steps()) + "]");
    Vector alpha(bs.scores.row(static_cast<std::size_t>(t - 1)).begin(),
                 bs.scores.row(static_cast<std::size_t>(t - 1)).end());
    for (std::int64_t j = t + 1; j <= bs.steps(); ++j) {
        const auto r = bs.scores.row(static_cast<std::size_t>(j - 1));
        for (std::size_t i = 0; i < alpha.size(); ++i) {
            alpha[i] = std::max(alpha[i], r[i]);
        }
    }
    return alpha;
}

/// All future-score rows at once (suffix maxima); row t-1 equals future_scores(bs, t).
inline Matrix future_score_table(const BlockScores& bs)
{
    Matrix out = bs.scores;
    for (std::int64_t t = bs.steps() - 1; t >= 1; --t) {
        auto cur = out.row(static_cast<std::size_t>(t - 1));
        const auto next = out.row(static_cast<std::size_t>(t));
        for (std::size_t i = 0; i < cur.size(); ++i) {
            cur[i] = std::max(cur[i], next[i]);
        }
    }
    return out;
}

/**
 * Indices (into `scores`) of the `keep` largest entries; ties keep the later index.
 * Returned ascending. Indices are assumed to be in increasing position order.
 */
inline std::vector<std::size_t> top_keep(std::span<const double> scores, std::size_t keep)
{
    require(keep <= scores.size(), "top_keep: keep exceeds candidate count");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) {
            return scores[a] > scores[b];
        }
        return a > b;
    });
    idx.resize(keep);
    std::sort(idx.begin(), idx.end());
    return idx;
}

struct GoldenStep {
    std::int64_t step = 0;
    std::vector<std::int64_t> eligible_positions;
    std::vector<double> alpha;  // aligned with eligible_positions
    std::vector<std::int64_t> kept_positions;
    std::vector<std::int64_t> evicted_positions;
};

/// Sequential golden eviction for one group: each step keeps Top_{B-L} of alpha over the current eligible set.
inline std::vector<GoldenStep> golden_trace(const BlockScores& bs)
{
    const EvictionSchedule& s = bs.schedule;
    const Matrix alpha = future_score_table(bs);
    std::vector<std::int64_t> cache;
    for (std::int64_t p = 0; p < s.trigger_size(); ++p) {
        cache.push_back(p);
    }
    std::vector<GoldenStep> trace;
    for (std::int64_t t = 1; t <= bs.steps(); ++t) {
        GoldenStep st;
        st.step = t;
        st.eligible_positions.assign(cache.begin(), cache.begin() + s.budget);
        const auto arow = alpha.row(static_cast<std::size_t>(t - 1));
        for (auto pos : st.eligible_positions) {
            st.alpha.push_back(arow[static_cast<std::size_t>(pos)]);
        }
        const auto keep = top_keep(st.alpha, static_cast<std::size_t>(s.keep_count()));
        std::vector<char> kept(st.eligible_positions.size(), 0);
        for (auto k : keep) {
            kept[k] = 1;
        }
        std::vector<std::int64_t> next;
        for (std::size_t i = 0; i < st.eligible_positions.size(); ++i) {
            (kept[i] ? st.kept_positions : st.evicted_positions).push_back(st.eligible_positions[i]);
        }
        next = st.kept_positions;
        next.insert(next.end(), cache.begin() + s.budget, cache.end());
        // Append the next L positions (queries of block t) before the following step.
        const std::int64_t first_new = s.budget + t * s.eviction_length;
        for (std::int64_t p = first_new; p < first_new + s.eviction_length && p < bs.seq_len; ++p) {
            next.push_back(p);
        }
        cache = std::move(next);
        trace.push_back(std::move(st));
    }
    return trace;
}

/// Block scores of one (layer, group) taken straight from a full forward.
inline BlockScores group_block_scores(const ForwardOutput& fwd, const ModelConfig& c, std::size_t layer,
                                      std::size_t group, const EvictionSchedule& s)
{
    require(!fwd.attention.empty(), "group_block_scores: forward was run without attention rows");
    std::vector<const PackedAttention*> heads;
    const auto g = static_cast<std::size_t>(c.group_size());
    for (std::size_t h = group * g; h < (group + 1) * g; ++h) {
        heads.push_back(&fwd.attn(layer, h, static_cast<std::size_t>(c.q_heads)));
    }
    return block_scores(heads, s);
}

inline std::vector<GoldenStep> golden_trace_for_group(const ForwardOutput& fwd, const ModelConfig& c, std::size_t layer,
                                                      std::size_t group, const EvictionSchedule& s,
                                                      BlockScores* scores_out = nullptr)
{
    BlockScores bs = group_block_scores(fwd, c, layer, group, s);
    auto trace = golden_trace(bs);
    if (scores_out != nullptr) {
        *scores_out = std::move(bs);
    }
    return trace;
}

struct RenormalizedOutput {
    Vector output;   // o-hat
    double evicted_mass = 0.0;
};

/// Output over the kept keys with the kept attention renormalized: a_i / (1 - eps).
inline RenormalizedOutput renormalized_output(std::span<const double> attn_row, std::span<const Vector> values,
                                              std::span<const std::size_t> keep)
{
    require(attn_row.size() == values.size(), "renormalized_output: row/value count mismatch");
    if (keep.empty()) {
        throw Error(ErrorKind::invalid_argument, "degenerate renormalization: empty keep set");
    }
    std::vector<char> kept(attn_row.size(), 0);
    for (auto k : keep) {
        require(k < attn_row.size(), "renormalized_output: keep index out of range");
        kept[k] = 1;
    }
    double eps = 0.0;
    for (std::size_t i = 0; i < attn_row.size(); ++i) {
        if (!kept[i]) {
            eps += attn_row[i];
        }
    }
    if (eps >= 1.0 - 1e-12) {
        throw Error(ErrorKind::invalid_argument, "degenerate renormalization: evicted mass " + std::to_string(eps));
    }
    const std::size_t D = values.front().size();
    RenormalizedOutput out;
    out.output.assign(D, 0.0);
    out.evicted_mass = eps;
    const double scale = 1.0 / (1.0 - eps);
    for (std::size_t i = 0; i < attn_row.size(); ++i) {
        if (kept[i]) {
            for (std::size_t d = 0; d < D; ++d) {
                out.output[d] += attn_row[i] * scale * values[i][d];
            }
        }
    }
    return out;
}

/// Full attention output o = sum_i a_i v_i.
inline Vector attention_output(std::span<const double> attn_row, std::span<const Vector> values)
{
    require(attn_row.size() == values.size() && !values.empty(), "attention_output: row/value count mismatch");
    Vector o(values.front().size(), 0.0);
    for (std::size_t i = 0; i < attn_row.size(); ++i) {
        for (std::size_t d = 0; d < o.size(); ++d) {
            o[d] += attn_row[i] * values[i][d];
        }
    }
    return o;
}

/// Error bound check ||o - o_hat|| <= 2 C eps (+1e-9 slack).
inline bool check_bound(std::span<const double> o, std::span<const double> o_hat, double eps, double c_max_norm)
{
    require(o.size() == o_hat.size(), "check_bound: dimension mismatch");
    double s = 0.0;
    for (std::size_t d = 0; d < o.size(); ++d) {
        s += (o[d] - o_hat[d]) * (o[d] - o_hat[d]);
    }
    return std::sqrt(s) <= 2.0 * c_max_norm * eps + 1e-9;
}

inline double max_value_norm(std::span<const Vector> values)
{
    double c = 0.0;
    for (const auto& v : values) {
        c = std::max(c, norm2(v));
    }
    return c;
}

}  // namespace fkv
