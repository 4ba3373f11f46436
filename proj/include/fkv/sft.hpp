// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iterator>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fkv/error.hpp"
#include "fkv/golden.hpp"
#include "fkv/model.hpp"
#include "fkv/numerics.hpp"
#include "fkv/parallel.hpp"
#include "fkv/policies.hpp"
#include "fkv/scorer.hpp"
#include "fkv/stream.hpp"

namespace fkv {

/// Golden alpha and scorer features of the eligible set at one eviction step of one group.
struct LabelState {
    std::int64_t sequence = 0;
    std::int64_t step = 0;
    std::size_t layer = 0;
    std::size_t group = 0;
    std::vector<std::int64_t> positions;  // eligible positions, oldest first
    Vector alpha;                         // aligned with positions
    Matrix features;                      // rows aligned with positions

    friend bool operator==(const LabelState&, const LabelState&) = default;
};

struct LabelSet {
    EvictionSchedule schedule;
    std::size_t layers = 0;
    std::size_t groups = 0;
    std::size_t feature_dim = 0;
    std::vector<LabelState> states;  // sequence-major, then step, layer, group

    friend bool operator==(const LabelSet&, const LabelSet&) = default;
};

/// Golden policy that also records the scorer features of every eligible entry.
class GoldenLabeler final : public EvictionPolicy {
public:
    GoldenLabeler(GoldenPolicy golden, FeatureOptions features) : golden_(std::move(golden)), features_(features) {}
    std::string name() const override { return "golden"; }
    EvictionDecision decide(const EvictionContext& ctx, RandomStream& rng) const override
    {
        EvictionDecision d = golden_.decide(ctx, rng);
        d.candidate_features = extract_features(*ctx.cache, static_cast<std::size_t>(ctx.schedule.budget),
                                                ctx.schedule.eviction_length, features_);
        return d;
    }

private:
    GoldenPolicy golden_;
    FeatureOptions features_;
};

struct LabeledSequence {
    StreamResult stream;              // golden stream (events carry alpha and features)
    std::vector<LabelState> states;   // steps 1..M only
};

/**
 * Runs golden eviction over one sequence and collects labels along the golden trajectory.
 * A trailing trigger without a future block (step > M) is dropped: all its alpha are 0.
 */
inline LabeledSequence label_sequence(const ModelParams& p, std::span<const std::int64_t> tokens, std::int64_t seq_id,
                                      const EvictionSchedule& s, const FeatureOptions& features,
                                      const ForwardOutput* full = nullptr)
{
    ForwardOutput local;
    if (full == nullptr) {
        local = forward_full(p, tokens, true);
        full = &local;
    }
    const std::int64_t M = golden_step_count(static_cast<std::int64_t>(tokens.size()), s);
    GoldenLabeler labeler(make_golden_policy(*full, p.config, s), features);
    StreamOptions opt;
    opt.schedule = s;
    opt.accumulator_decay = features.decay;
    LabeledSequence out;
    out.stream = run_stream(p, tokens, &labeler, RandomStream(0, 0), opt);
    for (auto& ev : out.stream.events) {
        if (ev.step > M) {
            continue;
        }
        LabelState st;
        st.sequence = seq_id;
        st.step = ev.step;
        st.layer = ev.layer;
        st.group = ev.group;
        st.positions = ev.outcome.eligible_positions;
        st.alpha = ev.scores;
        st.features = std::move(ev.candidate_features);
        out.states.push_back(std::move(st));
    }
    return out;
}

struct RankingPair {
    std::size_t i = 0;  // lower alpha
    std::size_t j = 0;  // higher alpha
};

/**
 * P pairs drawn uniformly (with replacement) over unordered index pairs with unequal alpha,
 * oriented so alpha[i] < alpha[j]. An all-equal alpha vector yields no pairs.
 */
inline std::vector<RankingPair> build_ranking_pairs(std::span<const double> alpha, std::size_t P, RandomStream& rng)
{
    std::vector<RankingPair> pairs;
    if (alpha.size() < 2 || std::adjacent_find(alpha.begin(), alpha.end(), std::not_equal_to<>()) == alpha.end()) {
        return pairs;
    }
    const std::uint64_t n = alpha.size();
    while (pairs.size() < P) {
        const auto a = static_cast<std::size_t>(rng.below(n));
        const auto b = static_cast<std::size_t>(rng.below(n));
        if (alpha[a] == alpha[b]) {
            continue;
        }
        pairs.push_back(alpha[a] < alpha[b] ? RankingPair{a, b} : RankingPair{b, a});
    }
    return pairs;
}

/// Hinge sum over pairs of max(0, m - (phi_j - phi_i)), given per-row scores.
inline double pairwise_hinge(std::span<const double> phi, std::span<const RankingPair> pairs, double margin)
{
    double loss = 0.0;
    for (const auto& pr : pairs) {
        loss += std::max(0.0, margin - (phi[pr.j] - phi[pr.i]));
    }
    return loss;
}

/**
 * Summed hinge loss of `pairs` over the rows of `features`. When `grad` is given,
 * grad_scale * d(loss)/d(params) is accumulated into it; only violated pairs contribute.
 */
inline double pairwise_loss_and_grad(const ScorerParams& p, const Matrix& features, std::span<const RankingPair> pairs,
                                     double margin, ScorerParams* grad = nullptr, double grad_scale = 1.0)
{
    require(margin > 0.0, "pairwise_loss_and_grad: margin must be > 0");
    const Vector phi = score_rows(p, features);
    double loss = 0.0;
    Vector dphi(features.rows, 0.0);
    for (const auto& pr : pairs) {
        require(pr.i < features.rows && pr.j < features.rows, "pairwise_loss_and_grad: pair index out of range");
        const double h = margin - (phi[pr.j] - phi[pr.i]);
        if (h > 0.0) {
            loss += h;
            dphi[pr.i] += 1.0;
            dphi[pr.j] -= 1.0;
        }
    }
    if (grad != nullptr) {
        for (std::size_t r = 0; r < features.rows; ++r) {
            score_grad(p, features.row(r), grad_scale * dphi[r], *grad);
        }
    }
    return loss;
}

/// Fraction of pairs with phi_j > phi_i strictly (ties count as wrong).
inline double ranking_accuracy(std::span<const double> phi, std::span<const RankingPair> pairs)
{
    require(!pairs.empty(), "ranking_accuracy: empty pair set");
    std::size_t ok = 0;
    for (const auto& pr : pairs) {
        ok += phi[pr.j] > phi[pr.i] ? 1 : 0;
    }
    return static_cast<double>(ok) / static_cast<double>(pairs.size());
}

struct SftConfig {
    double margin = 0.01;
    std::size_t batch_size = 8;    // label states (sequence, step) per update
    std::int64_t steps = 1000;
    double learning_rate = 1e-2;
    std::int64_t warmup_steps = 0;
    double momentum = 0.0;
    std::size_t pairs_per_state = 256;
    double heldout_fraction = 0.1;
    std::int64_t log_every = 50;
    std::uint64_t seed = 1;

    void validate() const
    {
        require(margin > 0.0, "SftConfig: margin must be > 0");
        require(pairs_per_state >= 1 && batch_size >= 1, "SftConfig: pairs_per_state and batch_size must be >= 1");
        require(steps >= 0 && learning_rate >= 0.0 && warmup_steps >= 0, "SftConfig: bad schedule");
        require(momentum >= 0.0 && momentum < 1.0, "SftConfig: momentum must be in [0, 1)");
        require(heldout_fraction >= 0.0 && heldout_fraction < 1.0, "SftConfig: heldout_fraction must be in [0, 1)");
    }

    friend bool operator==(const SftConfig&, const SftConfig&) = default;
};

/// Linear warmup, then cosine decay from lr to 0 over the remaining steps.
inline double cosine_lr(const SftConfig& c, std::int64_t step)
{
    if (step < c.warmup_steps) {
        return c.learning_rate * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
    }
    const double span = static_cast<double>(std::max<std::int64_t>(1, c.steps - c.warmup_steps));
    const double frac = static_cast<double>(step - c.warmup_steps) / span;
    return 0.5 * c.learning_rate * (1.0 + std::cos(std::numbers::pi * frac));
}

/// Held-out sequence ids: the ceil(fraction * n) ids with the smallest hash (at least one when n >= 2).
inline std::vector<std::int64_t> heldout_sequences(std::vector<std::int64_t> ids, double fraction, std::uint64_t seed)
{
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    if (ids.size() < 2 || fraction <= 0.0) {
        return {};
    }
    auto count = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(ids.size())));
    count = std::clamp<std::size_t>(count, 1, ids.size() - 1);
    std::stable_sort(ids.begin(), ids.end(), [&](std::int64_t a, std::int64_t b) {
        return splitmix64(seed ^ static_cast<std::uint64_t>(a)) < splitmix64(seed ^ static_cast<std::uint64_t>(b));
    });
    ids.resize(count);
    std::sort(ids.begin(), ids.end());
    return ids;
}

struct SftLogRow {
    std::int64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;              // hinge summed over a state's pairs, mean over batch and scorers
    double heldout_accuracy = 0.0;  // pooled over scorers; NaN without a held-out split
};

struct SftResult {
    ScorerSet scorers;
    std::vector<SftLogRow> log;
    std::vector<std::int64_t> heldout;
    double final_heldout_accuracy = 0.0;
};

/// A state is addressed by (sequence, step); it holds one LabelState per scorer.
struct LabelIndex {
    std::vector<std::pair<std::int64_t, std::int64_t>> keys;
    std::vector<std::vector<const LabelState*>> by_key;  // [key][layer * groups + group]
};

inline LabelIndex index_labels(const LabelSet& labels, const std::vector<std::int64_t>& sequences)
{
    std::map<std::pair<std::int64_t, std::int64_t>, std::vector<const LabelState*>> m;
    const std::size_t n = labels.layers * labels.groups;
    for (const auto& st : labels.states) {
        if (!std::binary_search(sequences.begin(), sequences.end(), st.sequence)) {
            continue;
        }
        auto& slot = m[{st.sequence, st.step}];
        slot.resize(n, nullptr);
        slot[st.layer * labels.groups + st.group] = &st;
    }
    LabelIndex idx;
    for (auto& [k, v] : m) {
        for (const auto* p : v) {
            require(p != nullptr, "index_labels: incomplete label state for sequence " + std::to_string(k.first),
                    ErrorKind::invariant);
        }
        idx.keys.push_back(k);
        idx.by_key.push_back(std::move(v));
    }
    return idx;
}

/// Fixed evaluation pairs: P per state, per scorer slot.
inline std::vector<std::vector<std::vector<RankingPair>>> fixed_pairs(const LabelIndex& idx, std::size_t P,
                                                                      RandomStream rng)
{
    std::vector<std::vector<std::vector<RankingPair>>> out(idx.by_key.size());
    for (std::size_t k = 0; k < idx.by_key.size(); ++k) {
        for (std::size_t s = 0; s < idx.by_key[k].size(); ++s) {
            RandomStream r = rng.derive(k * idx.by_key[k].size() + s);
            out[k].push_back(build_ranking_pairs(idx.by_key[k][s]->alpha, P, r));
        }
    }
    return out;
}

/// Pooled accuracy of every scorer on its own fixed pairs.
inline double pooled_accuracy(const ScorerSet& scorers, const LabelIndex& idx,
                              const std::vector<std::vector<std::vector<RankingPair>>>& pairs)
{
    std::size_t ok = 0;
    std::size_t total = 0;
    for (std::size_t k = 0; k < idx.by_key.size(); ++k) {
        for (std::size_t s = 0; s < idx.by_key[k].size(); ++s) {
            const auto& pp = pairs[k][s];
            if (pp.empty()) {
                continue;
            }
            const Vector phi = score_rows(scorers.scorers[s], idx.by_key[k][s]->features);
            for (const auto& pr : pp) {
                ok += phi[pr.j] > phi[pr.i] ? 1 : 0;
            }
            total += pp.size();
        }
    }
    require(total > 0, "pooled_accuracy: empty pair set");
    return static_cast<double>(ok) / static_cast<double>(total);
}

/**
 * Supervised ranking stage. Each update draws `batch_size` (sequence, step) states from the
 * training split; every (layer, group) scorer takes P pairs per state from its own labels. The
 * per-state loss is the hinge summed over its pairs; the update uses its mean over the batch
 * (SGD with optional momentum, cosine lr).
 */
inline SftResult train_sft(const LabelSet& labels, const ScorerSet& init, const SftConfig& cfg, std::size_t threads = 1)
{
    cfg.validate();
    require(!labels.states.empty(), "train_sft: empty dataset");
    require(init.layers == labels.layers && init.groups == labels.groups, "train_sft: scorer set shape mismatch");
    std::vector<std::int64_t> all;
    for (const auto& st : labels.states) {
        all.push_back(st.sequence);
    }
    SftResult res;
    res.heldout = heldout_sequences(all, cfg.heldout_fraction, cfg.seed);
    std::vector<std::int64_t> train_ids;
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    std::set_difference(all.begin(), all.end(), res.heldout.begin(), res.heldout.end(), std::back_inserter(train_ids));

    const LabelIndex train = index_labels(labels, train_ids);
    const LabelIndex held = index_labels(labels, res.heldout);
    require(!train.keys.empty(), "train_sft: no training states");
    const RandomStream root(cfg.seed, stream_key({0x736674ULL}));
    const auto held_pairs = fixed_pairs(held, cfg.pairs_per_state, root.derive(1));
    bool have_held = false;
    for (const auto& k : held_pairs) {
        for (const auto& v : k) {
            have_held = have_held || !v.empty();
        }
    }

    res.scorers = init;
    const std::size_t n_scorers = init.scorers.size();
    std::vector<Vector> velocity(n_scorers);
    for (std::size_t s = 0; s < n_scorers; ++s) {
        velocity[s].assign(init.scorers[s].parameter_count(), 0.0);
    }
    auto log_row = [&](std::int64_t step, double lr, double loss) {
        SftLogRow row{step, lr, loss, std::nan("")};
        if (have_held) {
            row.heldout_accuracy = pooled_accuracy(res.scorers, held, held_pairs);
        }
        res.log.push_back(row);
    };

    std::vector<double> losses(n_scorers, 0.0);
    for (std::int64_t step = 0; step < cfg.steps; ++step) {
        const double lr = cosine_lr(cfg, step);
        RandomStream batch_rng = root.derive(2).derive(static_cast<std::uint64_t>(step));
        std::vector<std::size_t> batch;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            batch.push_back(static_cast<std::size_t>(batch_rng.below(train.keys.size())));
        }
        parallel_for(n_scorers, threads, [&](std::size_t s) {
            ScorerParams& p = res.scorers.scorers[s];
            ScorerParams grad(p.input_dim, p.hidden);
            std::vector<std::pair<const LabelState*, std::vector<RankingPair>>> work;
            std::size_t n_pairs = 0;
            for (std::size_t b = 0; b < batch.size(); ++b) {
                const LabelState* st = train.by_key[batch[b]][s];
                RandomStream pr = batch_rng.derive(1 + b * n_scorers + s);
                work.emplace_back(st, build_ranking_pairs(st->alpha, cfg.pairs_per_state, pr));
                n_pairs += work.back().second.size();
            }
            if (n_pairs == 0) {
                losses[s] = 0.0;
                return;
            }
            const double scale = 1.0 / static_cast<double>(work.size());
            double loss = 0.0;
            for (const auto& [st, pairs] : work) {
                loss += pairwise_loss_and_grad(p, st->features, pairs, cfg.margin, &grad, scale);
            }
            losses[s] = loss * scale;
            std::size_t i = 0;
            Vector& vel = velocity[s];
            const Vector g = [&] {
                Vector v;
                grad.for_each([&](double x) { v.push_back(x); });
                return v;
            }();
            p.for_each([&](double& w) {
                vel[i] = cfg.momentum * vel[i] + g[i];
                w -= lr * vel[i];
                ++i;
            });
        });
        double mean_loss = 0.0;
        for (double l : losses) {
            mean_loss += l;
        }
        mean_loss /= static_cast<double>(n_scorers);
        if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
            log_row(step, lr, mean_loss);
        }
    }
    res.final_heldout_accuracy = have_held ? pooled_accuracy(res.scorers, held, held_pairs) : std::nan("");
    return res;
}

}  // namespace fkv
