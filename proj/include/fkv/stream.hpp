// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fkv/kv_cache.hpp"
#include "fkv/model.hpp"
#include "fkv/policies.hpp"
#include "fkv/scorer.hpp"

namespace fkv {

struct StreamOptions {
    std::optional<EvictionSchedule> schedule;  // empty: full cache, never evict
    double accumulator_decay = 0.9;
    bool record_events = true;
    bool record_retained = false;
};

/// One eviction on one (layer, group).
struct EvictionEvent {
    std::int64_t step = 0;
    std::int64_t position = 0;  // last query before the eviction
    std::size_t layer = 0;
    std::size_t group = 0;
    EvictionOutcome outcome;
    ScoreVector scores;
    std::optional<EvictionAction> action;
    Matrix candidate_features;
};

struct StreamResult {
    Vector loss;     // T - 1
    Vector entropy;  // T, under the evicted cache
    std::int64_t eviction_steps = 0;
    std::vector<std::int64_t> eviction_positions;  // query position at which step t fired (index t-1)
    std::vector<EvictionEvent> events;             // step-major, then layer, group
    /// retained[t-1][layer * kv_heads + group]: positions held right after step t.
    std::vector<std::vector<std::vector<std::int64_t>>> retained;

    /// First position whose prediction sees an evicted cache (T if no eviction happened).
    std::int64_t first_affected_position(std::int64_t T) const
    {
        return eviction_positions.empty() ? T : eviction_positions.front() + 1;
    }
};

/**
 * Teacher-forced pass over `tokens` through forward_step_with_cache. Every query's attention
 * rows feed each group's ring and open chunk; when a group reaches B + L the chunk is closed,
 * the policy decides, and the eviction is applied. All groups evict in lockstep.
 */
inline StreamResult run_stream(const ModelParams& p, std::span<const std::int64_t> tokens, const EvictionPolicy* policy,
                               const RandomStream& rng, const StreamOptions& opt)
{
    const ModelConfig& c = p.config;
    const std::size_t T = tokens.size();
    require(T >= 1, "run_stream: empty sequence");
    if (opt.schedule) {
        opt.schedule->validate();
        require(policy != nullptr, "run_stream: an eviction schedule needs a policy");
    }
    const auto QH = static_cast<std::size_t>(c.q_heads);
    const auto KH = static_cast<std::size_t>(c.kv_heads);
    const auto G = static_cast<std::size_t>(c.group_size());
    const std::size_t window = opt.schedule ? attention_window_capacity(*opt.schedule) : 32;

    DecodeState state(c, window);
    std::vector<RandomStream> group_rng;
    for (std::size_t i = 0; i < static_cast<std::size_t>(c.layers) * KH; ++i) {
        group_rng.push_back(rng.derive(i));
    }

    StreamResult res;
    res.loss.assign(T - 1, 0.0);
    res.entropy.assign(T, 0.0);
    std::vector<std::span<const double>> rows(G);
    for (std::size_t t = 0; t < T; ++t) {
        const auto pos = static_cast<std::int64_t>(t);
        StepOutput so = forward_step_with_cache(p, state, tokens[t], pos);
        for (std::size_t l = 0; l < static_cast<std::size_t>(c.layers); ++l) {
            for (std::size_t g = 0; g < KH; ++g) {
                for (std::size_t h = 0; h < G; ++h) {
                    rows[h] = so.attention[l * QH + g * G + h];
                }
                state.group(l, g, KH).record_query(pos, rows);
            }
        }
        loss_and_entropy(so.logits, t + 1 < T ? tokens[t + 1] : 0, t + 1 < T ? &res.loss[t] : nullptr,
                         &res.entropy[t]);

        if (!opt.schedule || !eviction_due(state.groups.front(), *opt.schedule)) {
            continue;
        }
        const EvictionSchedule& s = *opt.schedule;
        ++res.eviction_steps;
        res.eviction_positions.push_back(pos);
        if (opt.record_retained) {
            res.retained.emplace_back();
        }
        for (std::size_t l = 0; l < static_cast<std::size_t>(c.layers); ++l) {
            for (std::size_t g = 0; g < KH; ++g) {
                GroupCache& gc = state.group(l, g, KH);
                require(eviction_due(gc, s), "run_stream: groups fell out of lockstep", ErrorKind::invariant);
                gc.close_chunk(opt.accumulator_decay);
                EvictionContext ctx{l, g, res.eviction_steps, &gc, s};
                EvictionDecision d = policy->decide(ctx, group_rng[l * KH + g]);
                EvictionOutcome out = apply_eviction(gc, s, d.keep);
                if (opt.record_events) {
                    res.events.push_back(EvictionEvent{res.eviction_steps, pos, l, g, std::move(out),
                                                       std::move(d.scores), std::move(d.action),
                                                       std::move(d.candidate_features)});
                }
                if (opt.record_retained) {
                    res.retained.back().push_back(gc.positions());
                }
            }
        }
    }
    return res;
}

/// Positions visible to query `q` of group `gi` given the retained snapshots of a stream.
inline std::vector<std::int64_t> visible_positions(const StreamResult& r, std::size_t gi, std::int64_t q)
{
    std::vector<std::int64_t> out;
    // Latest eviction that fired strictly before query q.
    std::int64_t step = -1;
    for (std::size_t t = 0; t < r.eviction_positions.size(); ++t) {
        if (r.eviction_positions[t] < q) {
            step = static_cast<std::int64_t>(t);
        }
    }
    std::int64_t next = 0;
    if (step >= 0) {
        out = r.retained[static_cast<std::size_t>(step)][gi];
        next = r.eviction_positions[static_cast<std::size_t>(step)] + 1;
    }
    for (std::int64_t p = next; p <= q; ++p) {
        out.push_back(p);
    }
    return out;
}

}  // namespace fkv
