// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fkv/corpus.hpp"
#include "fkv/error.hpp"
#include "fkv/model.hpp"
#include "fkv/numerics.hpp"
#include "fkv/parallel.hpp"
#include "fkv/policies.hpp"
#include "fkv/scorer.hpp"
#include "fkv/stream.hpp"

namespace fkv {

/// Reward menu. `ours` is the default; the others are ablations.
enum class RewardVariant {
    ours,       // -mean over E of dL^2
    ours_sum,   // -sum over E of dL^2
    low_large,  // -mean over E of L_evict
    all,        // -mean L_evict over every position
    low,        // -mean L_evict over low-entropy positions
    high,       // -mean L_evict over high-entropy positions
};

enum class Optimizer { sgd, adam };

struct RlConfig {
    std::size_t group_size = 8;
    double clip = 0.2;
    double kl_coef = 0.01;
    double margin = 1.5;                 // eta
    double low_entropy_fraction = 0.8;
    double learning_rate = 3e-4;
    std::int64_t warmup_steps = 10;
    std::int64_t steps = 200;
    std::size_t sequences_per_step = 1;
    std::size_t minibatches = 2;         // gradient steps per batch (one epoch)
    RewardVariant reward = RewardVariant::ours;
    Optimizer optimizer = Optimizer::adam;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::int64_t candidate_multiplier = 2;
    std::int64_t log_every = 1;
    std::uint64_t seed = 1;

    void validate() const
    {
        require(group_size >= 2, "RlConfig: group_size must be >= 2");
        require(clip > 0.0 && clip < 1.0, "RlConfig: clip must be in (0, 1)");
        require(margin > 0.0, "RlConfig: margin must be > 0");
        require(kl_coef >= 0.0 && learning_rate >= 0.0 && steps >= 0 && warmup_steps >= 0, "RlConfig: bad schedule");
        require(low_entropy_fraction > 0.0 && low_entropy_fraction <= 1.0, "RlConfig: bad low-entropy fraction");
        require(sequences_per_step >= 1 && minibatches >= 1, "RlConfig: batch sizes must be >= 1");
    }

    friend bool operator==(const RlConfig&, const RlConfig&) = default;
};

/// One sampled eviction of one (layer, group).
struct TrajectoryEvent {
    std::int64_t step = 0;
    std::size_t layer = 0;
    std::size_t group = 0;
    std::int64_t position = 0;
    std::vector<std::int64_t> candidate_positions;
    EvictionAction action;  // candidates are eligible indices; drawn index into candidates
    Matrix features;        // rows aligned with action.candidates

    friend bool operator==(const TrajectoryEvent& a, const TrajectoryEvent& b)
    {
        return a.step == b.step && a.layer == b.layer && a.group == b.group && a.position == b.position &&
               a.candidate_positions == b.candidate_positions && a.action.candidates == b.action.candidates &&
               a.action.drawn == b.action.drawn && a.action.logprob == b.action.logprob && a.features == b.features;
    }
};

struct Trajectory {
    std::int64_t sequence = 0;
    std::size_t index = 0;
    std::vector<TrajectoryEvent> events;
    Vector loss_evict;  // T - 1
    double reward = 0.0;
    double advantage = 0.0;

    friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/// Teacher-forced sampled rollout of the learned policy over one fixed sequence.
inline Trajectory rollout(const ModelParams& p, const ScorerSet& scorers, std::span<const std::int64_t> tokens,
                          std::int64_t seq_id, const EvictionSchedule& s, const RandomStream& rng,
                          std::int64_t candidate_multiplier = 2, const FeatureOptions& features = {})
{
    LearnedPolicy policy(&scorers, LearnedPolicyOptions{SamplingMode::sample, candidate_multiplier, features});
    StreamOptions opt;
    opt.schedule = s;
    opt.accumulator_decay = features.decay;
    StreamResult r = run_stream(p, tokens, &policy, rng, opt);
    Trajectory tr;
    tr.sequence = seq_id;
    tr.loss_evict = std::move(r.loss);
    for (auto& ev : r.events) {
        TrajectoryEvent te;
        te.step = ev.step;
        te.layer = ev.layer;
        te.group = ev.group;
        te.position = ev.position;
        te.action = std::move(*ev.action);
        for (auto c : te.action.candidates) {
            te.candidate_positions.push_back(ev.outcome.eligible_positions[c]);
        }
        te.features = std::move(ev.candidate_features);
        require(std::isfinite(te.action.logprob), "rollout: non-finite logprob", ErrorKind::invariant);
        tr.events.push_back(std::move(te));
    }
    return tr;
}

/**
 * Low-entropy mask: the floor(fraction * n) positions with the smallest entropy (ties by
 * index) are marked 1.
 */
inline std::vector<std::uint8_t> low_entropy_mask(std::span<const double> entropy, double fraction)
{
    std::vector<std::size_t> idx(entropy.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return entropy[a] < entropy[b]; });
    const auto n_low = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(entropy.size())));
    std::vector<std::uint8_t> mask(entropy.size(), 0);
    for (std::size_t i = 0; i < n_low; ++i) {
        mask[idx[i]] = 1;
    }
    return mask;
}

/// Sequence-level reward; all vectors are per predicted position (length T - 1).
inline double reward(std::span<const double> loss_ori, std::span<const double> loss_evict,
                     std::span<const double> entropy_ori, const RlConfig& cfg)
{
    require(loss_ori.size() == loss_evict.size() && loss_ori.size() == entropy_ori.size(),
            "reward: loss/entropy length mismatch");
    const auto low = low_entropy_mask(entropy_ori, cfg.low_entropy_fraction);
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < loss_ori.size(); ++t) {
        const double d = loss_evict[t] - loss_ori[t];
        const bool in_e = low[t] && d > cfg.margin;
        switch (cfg.reward) {
        case RewardVariant::ours:
        case RewardVariant::ours_sum:
            if (in_e) {
                acc += d * d;
                ++n;
            }
            break;
        case RewardVariant::low_large:
            if (in_e) {
                acc += loss_evict[t];
                ++n;
            }
            break;
        case RewardVariant::all:
            acc += loss_evict[t];
            ++n;
            break;
        case RewardVariant::low:
        case RewardVariant::high:
            if ((low[t] != 0) == (cfg.reward == RewardVariant::low)) {
                acc += loss_evict[t];
                ++n;
            }
            break;
        }
    }
    if (n == 0) {
        return 0.0;
    }
    return cfg.reward == RewardVariant::ours_sum ? -acc : -acc / static_cast<double>(n);
}

/// Group-relative advantages (R - mean) / (population std + 1e-8); all-equal rewards give zeros.
inline Vector advantages(std::span<const double> rewards)
{
    require(rewards.size() >= 2, "advantages: need a group of at least 2 rewards");
    const double n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards) {
        mean += r;
    }
    mean /= n;
    Vector out(rewards.size(), 0.0);
    if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards.front(); })) {
        return out;
    }
    double var = 0.0;
    for (double r : rewards) {
        var += (r - mean) * (r - mean);
    }
    const double sd = std::sqrt(var / n);
    for (std::size_t i = 0; i < rewards.size(); ++i) {
        out[i] = (rewards[i] - mean) / (sd + 1e-8);
    }
    return out;
}

struct GrpoStats {
    double objective = 0.0;
    double kl = 0.0;             // mean per-event KL
    double clip_fraction = 0.0;  // events where the clipped branch was taken
    std::size_t events = 0;
};

namespace detail {

/// Sums dphi into `grad`: dJ/dphi over candidates of one event.
struct EventTerms {
    double logprob = 0.0;
    double kl = 0.0;
    Vector dlogprob;  // d logprob / d phi
    Vector dkl;       // d KL / d phi
};

inline EventTerms event_terms(std::span<const double> phi, std::span<const double> phi_ref,
                              std::span<const std::size_t> drawn, bool with_kl)
{
    const std::size_t k = phi.size();
    EventTerms e;
    e.dlogprob.assign(k, 0.0);
    e.dkl.assign(k, 0.0);
    std::vector<char> taken(k, 0);
    for (auto d : drawn) {
        require(d < k && !taken[d], "grpo: stored draw inconsistent with the candidate set");
        const Vector pr = remaining_probs(phi, taken);
        e.logprob += std::log(pr[d]);
        for (std::size_t j = 0; j < k; ++j) {
            if (!taken[j]) {
                e.dlogprob[j] += pr[j];
            }
        }
        e.dlogprob[d] -= 1.0;
        if (with_kl) {
            const Vector q = remaining_probs(phi_ref, taken);
            double kl = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                if (!taken[j] && pr[j] > 0.0) {
                    kl += pr[j] * (std::log(pr[j]) - std::log(q[j]));
                }
            }
            for (std::size_t j = 0; j < k; ++j) {
                if (!taken[j] && pr[j] > 0.0) {
                    e.dkl[j] -= pr[j] * (std::log(pr[j]) - std::log(q[j]) - kl);
                }
            }
            e.kl += kl;
        }
        taken[d] = 1;
    }
    const double inv = drawn.empty() ? 0.0 : 1.0 / static_cast<double>(drawn.size());
    e.kl *= inv;
    for (double& v : e.dkl) {
        v *= inv;
    }
    // Use the exact log-softmax form for the value to match log_prob_of_draws bit for bit.
    e.logprob = log_prob_of_draws(phi, drawn);
    return e;
}

}  // namespace detail

/**
 * Clipped surrogate with a per-event KL penalty, averaged over every event of every trajectory:
 * J = mean_e [ min(r A, clip(r, 1 - eps, 1 + eps) A) - beta * KL_e ], r = exp(logprob - logprob_old).
 * When `grad` is given, dJ/dtheta is accumulated into it (ascent direction).
 */
inline GrpoStats grpo_objective_and_grad(const ScorerSet& theta, std::span<const Trajectory* const> trajectories,
                                         const ScorerSet& theta_ref, const RlConfig& cfg, ScorerSet* grad = nullptr)
{
    std::size_t n_events = 0;
    for (const auto* t : trajectories) {
        n_events += t->events.size();
    }
    GrpoStats st;
    st.events = n_events;
    if (n_events == 0) {
        return st;
    }
    const double inv = 1.0 / static_cast<double>(n_events);
    const bool with_kl = cfg.kl_coef != 0.0;
    std::size_t clipped = 0;
    for (const auto* t : trajectories) {
        const double A = t->advantage;
        for (const auto& ev : t->events) {
            require(ev.features.rows == ev.action.candidates.size(),
                    "grpo: stored features do not match the candidate set");
            const ScorerParams& sp = theta.at(ev.layer, ev.group);
            require(ev.features.cols == sp.input_dim, "grpo: stored feature width does not match the scorer");
            const Vector phi = score_rows(sp, ev.features);
            const Vector phi_ref = with_kl ? score_rows(theta_ref.at(ev.layer, ev.group), ev.features) : phi;
            const detail::EventTerms e = detail::event_terms(phi, phi_ref, ev.action.drawn, with_kl);
            const double r = std::exp(e.logprob - ev.action.logprob);
            const double unclipped = r * A;
            const double clipped_val = std::clamp(r, 1.0 - cfg.clip, 1.0 + cfg.clip) * A;
            const bool take_unclipped = unclipped <= clipped_val;
            clipped += take_unclipped ? 0 : 1;
            st.objective += (std::min(unclipped, clipped_val) - cfg.kl_coef * e.kl) * inv;
            st.kl += e.kl * inv;
            if (grad != nullptr) {
                const double g_lp = take_unclipped ? r * A : 0.0;
                ScorerParams& gp = grad->at(ev.layer, ev.group);
                for (std::size_t j = 0; j < phi.size(); ++j) {
                    const double dphi = (g_lp * e.dlogprob[j] - cfg.kl_coef * e.dkl[j]) * inv;
                    score_grad(sp, ev.features.row(j), dphi, gp);
                }
            }
        }
    }
    st.clip_fraction = static_cast<double>(clipped) * inv;
    return st;
}

/// Adam / SGD state over the flattened scorer parameters.
class ParamOptimizer {
public:
    ParamOptimizer(const RlConfig& cfg, std::size_t n) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

    /// Descends on `loss_grad` (gradient of the quantity to minimize).
    void step(Vector& params, std::span<const double> loss_grad, double lr)
    {
        require(params.size() == loss_grad.size() && params.size() == m_.size(), "ParamOptimizer: size mismatch");
        ++t_;
        if (cfg_.optimizer == Optimizer::sgd) {
            for (std::size_t i = 0; i < params.size(); ++i) {
                params[i] -= lr * loss_grad[i];
            }
            return;
        }
        const double b1 = cfg_.adam_beta1;
        const double b2 = cfg_.adam_beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = b1 * m_[i] + (1.0 - b1) * loss_grad[i];
            v_[i] = b2 * v_[i] + (1.0 - b2) * loss_grad[i] * loss_grad[i];
            params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.adam_eps);
        }
    }

private:
    RlConfig cfg_;
    Vector m_;
    Vector v_;
    std::int64_t t_ = 0;
};

inline double warmup_lr(const RlConfig& c, std::int64_t step)
{
    if (step < c.warmup_steps) {
        return c.learning_rate * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
    }
    return c.learning_rate;
}

struct RlLogRow {
    std::int64_t step = 0;
    double mean_reward = 0.0;
    double mean_abs_advantage = 0.0;
    double kl = 0.0;
    double clip_fraction = 0.0;
};

struct RlResult {
    ScorerSet scorers;
    std::vector<RlLogRow> log;
    std::vector<Trajectory> last_trajectories;  // rollouts of the final step
};

/// Full-cache reference used by the reward: per-position loss and entropy (both length T - 1).
struct ReferencePass {
    Vector loss;
    Vector entropy;
};

inline ReferencePass reference_pass(const ModelParams& p, std::span<const std::int64_t> tokens)
{
    const ForwardOutput f = forward_full(p, tokens, false);
    ReferencePass r;
    r.loss = f.loss;
    r.entropy.assign(f.entropy.begin(), f.entropy.end() - 1);
    return r;
}

/**
 * GRPO stage. Step k uses dataset sequences (k * per_step + i) mod n in fixed order; each gets
 * G rollouts from derived streams, rewards against one cached full pass, group advantages,
 * then one epoch of `minibatches` updates with theta_old frozen at the rollout parameters.
 * theta_ref stays at the initial scorers.
 */
inline RlResult train_rl(const std::vector<Sequence>& dataset, const ModelParams& llm, const ScorerSet& init,
                         const EvictionSchedule& schedule, const RlConfig& cfg, const FeatureOptions& features = {},
                         std::size_t threads = 1)
{
    cfg.validate();
    require(!dataset.empty(), "train_rl: empty dataset");
    for (const auto& s : dataset) {
        require(static_cast<std::int64_t>(s.tokens.size()) > schedule.trigger_size(),
                "train_rl: sequence " + std::to_string(s.id) + " is not longer than B + L");
    }
    std::vector<ReferencePass> refs(dataset.size());
    parallel_for(dataset.size(), threads, [&](std::size_t i) { refs[i] = reference_pass(llm, dataset[i].tokens); });

    RlResult res;
    res.scorers = init;
    const ScorerSet& ref = init;
    Vector params = flatten(res.scorers);
    ParamOptimizer opt(cfg, params.size());
    const RandomStream root(cfg.seed, stream_key({0x6772706fULL}));

    for (std::int64_t step = 0; step < cfg.steps; ++step) {
        std::vector<std::size_t> seqs;
        for (std::size_t i = 0; i < cfg.sequences_per_step; ++i) {
            seqs.push_back((static_cast<std::size_t>(step) * cfg.sequences_per_step + i) % dataset.size());
        }
        std::vector<Trajectory> trajs(seqs.size() * cfg.group_size);
        parallel_for(trajs.size(), threads, [&](std::size_t k) {
            const Sequence& sq = dataset[seqs[k / cfg.group_size]];
            const RandomStream rng = root.derive(static_cast<std::uint64_t>(step))
                                         .derive(static_cast<std::uint64_t>(sq.id))
                                         .derive(k % cfg.group_size);
            trajs[k] = rollout(llm, res.scorers, sq.tokens, sq.id, schedule, rng, cfg.candidate_multiplier, features);
            trajs[k].index = k % cfg.group_size;
            const ReferencePass& rp = refs[seqs[k / cfg.group_size]];
            trajs[k].reward = reward(rp.loss, trajs[k].loss_evict, rp.entropy, cfg);
        });
        RlLogRow row;
        row.step = step;
        for (std::size_t b = 0; b < seqs.size(); ++b) {
            Vector rs;
            for (std::size_t g = 0; g < cfg.group_size; ++g) {
                rs.push_back(trajs[b * cfg.group_size + g].reward);
            }
            const Vector adv = advantages(rs);
            for (std::size_t g = 0; g < cfg.group_size; ++g) {
                trajs[b * cfg.group_size + g].advantage = adv[g];
                row.mean_reward += rs[g];
                row.mean_abs_advantage += std::abs(adv[g]);
            }
        }
        row.mean_reward /= static_cast<double>(trajs.size());
        row.mean_abs_advantage /= static_cast<double>(trajs.size());

        const double lr = warmup_lr(cfg, step);
        const std::size_t nb = std::min(cfg.minibatches, trajs.size());
        for (std::size_t mb = 0; mb < nb; ++mb) {
            std::vector<const Trajectory*> part;
            for (std::size_t k = mb; k < trajs.size(); k += nb) {
                part.push_back(&trajs[k]);
            }
            ScorerSet g = res.scorers.zeros_like();
            const GrpoStats gs = grpo_objective_and_grad(res.scorers, part, ref, cfg, &g);
            row.kl += gs.kl / static_cast<double>(nb);
            row.clip_fraction += gs.clip_fraction / static_cast<double>(nb);
            Vector lg = flatten(g);
            for (double& v : lg) {
                v = -v;
            }
            opt.step(params, lg, lr);
            unflatten(params, res.scorers);
        }
        if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
            res.log.push_back(row);
        }
        if (step + 1 == cfg.steps) {
            res.last_trajectories = std::move(trajs);
        }
    }
    return res;
}

}  // namespace fkv
