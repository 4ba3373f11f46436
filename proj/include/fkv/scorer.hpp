// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "fkv/error.hpp"
#include "fkv/kv_cache.hpp"
#include "fkv/numerics.hpp"

namespace fkv {

/// How cumulative/decayed sums enter the feature vector.
enum class AccumulatorMode { per_head, group_mean };

/// Which parts of x_n the scorer sees; attn_only zeroes k and v.
enum class FeatureMask { attn_kv, attn_only };

struct FeatureOptions {
    AccumulatorMode accumulators = AccumulatorMode::per_head;
    FeatureMask mask = FeatureMask::attn_kv;
    double decay = 0.9;

    friend bool operator==(const FeatureOptions&, const FeatureOptions&) = default;
};

constexpr std::size_t kFeaturesPerHead = 6;

inline std::size_t feature_dim(std::size_t head_dim, std::size_t group_size)
{
    return 2 * head_dim + kFeaturesPerHead * group_size;
}

/**
 * Adds a chunk of attention rows to the accumulators and closes the chunk:
 * S += c, D = decay * D + c. `chunk_per_head[h]` is (queries x entries) for group head h.
 * In group_mean mode the head-mean contribution is credited to every head slot.
 */
inline void update_accumulators(GroupCache& cache, std::span<const Matrix> chunk_per_head, double decay,
                                AccumulatorMode mode = AccumulatorMode::per_head)
{
    require(chunk_per_head.size() == cache.heads(), "update_accumulators: head count mismatch");
    for (const auto& m : chunk_per_head) {
        require(m.cols == cache.size(), "update_accumulators: column count must equal retained count");
    }
    const std::size_t g = cache.heads();
    for (std::size_t n = 0; n < cache.size(); ++n) {
        std::vector<double> c(g, 0.0);
        for (std::size_t h = 0; h < g; ++h) {
            for (std::size_t r = 0; r < chunk_per_head[h].rows; ++r) {
                c[h] += chunk_per_head[h](r, n);
            }
        }
        if (mode == AccumulatorMode::group_mean) {
            double mean = 0.0;
            for (double v : c) {
                mean += v;
            }
            mean /= static_cast<double>(g);
            std::fill(c.begin(), c.end(), mean);
        }
        for (std::size_t h = 0; h < g; ++h) {
            cache.add_chunk(n, h, c[h]);
        }
    }
    cache.close_chunk(decay);
}

/// Window lengths of the recent-attention features: 8, 16, 32 and the eviction length.
inline std::array<std::size_t, 4> feature_windows(std::int64_t eviction_length)
{
    return {8, 16, 32, static_cast<std::size_t>(eviction_length)};
}

/**
 * One feature row per entry in [0, count): [k (D) | v (D) | per head: w8 w16 w32 wL S Dn].
 * Windows sum the last w recorded queries without renormalization.
 */
inline Matrix extract_features(const GroupCache& cache, std::size_t count, std::int64_t eviction_length,
                               const FeatureOptions& opt = {})
{
    require(count <= cache.size(), "extract_features: count exceeds cache size");
    const std::size_t D = cache.head_dim();
    const std::size_t g = cache.heads();
    const auto windows = feature_windows(eviction_length);
    Matrix out(count, feature_dim(D, g));
    for (std::size_t n = 0; n < count; ++n) {
        auto row = out.row(n);
        if (opt.mask == FeatureMask::attn_kv) {
            const auto k = cache.key(n);
            const auto v = cache.value(n);
            std::copy(k.begin(), k.end(), row.begin());
            std::copy(v.begin(), v.end(), row.begin() + static_cast<std::ptrdiff_t>(D));
        }
        double cum_mean = 0.0;
        double dec_mean = 0.0;
        for (std::size_t h = 0; h < g; ++h) {
            cum_mean += cache.cum_score(n, h);
            dec_mean += cache.decayed_score(n, h);
        }
        cum_mean /= static_cast<double>(g);
        dec_mean /= static_cast<double>(g);
        for (std::size_t h = 0; h < g; ++h) {
            double* a = row.data() + 2 * D + h * kFeaturesPerHead;
            for (std::size_t w = 0; w < windows.size(); ++w) {
                a[w] = cache.window_sum(n, h, windows[w]);
            }
            const bool per_head = opt.accumulators == AccumulatorMode::per_head;
            a[4] = per_head ? cache.cum_score(n, h) : cum_mean;
            a[5] = per_head ? cache.decayed_score(n, h) : dec_mean;
        }
    }
    return out;
}

/// Two-layer MLP: phi = sigmoid(x W1 + b1) W2 + b2.
struct ScorerParams {
    std::size_t input_dim = 0;
    std::size_t hidden = 0;
    Vector w1;  // input_dim x hidden, row-major
    Vector b1;  // hidden
    Vector w2;  // hidden
    double b2 = 0.0;

    ScorerParams() = default;
    ScorerParams(std::size_t in, std::size_t h) : input_dim(in), hidden(h), w1(in * h, 0.0), b1(h, 0.0), w2(h, 0.0)
    {
        require(in >= 1 && h >= 1, "ScorerParams: dims must be >= 1");
    }

    std::size_t parameter_count() const { return w1.size() + b1.size() + w2.size() + 1; }

    void fill_zero()
    {
        std::fill(w1.begin(), w1.end(), 0.0);
        std::fill(b1.begin(), b1.end(), 0.0);
        std::fill(w2.begin(), w2.end(), 0.0);
        b2 = 0.0;
    }

    /// Applies fn(double&) to every parameter in the fixed order w1, b1, w2, b2.
    template <typename Fn>
    void for_each(Fn&& fn)
    {
        for (double& v : w1) fn(v);
        for (double& v : b1) fn(v);
        for (double& v : w2) fn(v);
        fn(b2);
    }

    template <typename Fn>
    void for_each(Fn&& fn) const
    {
        for (double v : w1) fn(v);
        for (double v : b1) fn(v);
        for (double v : w2) fn(v);
        fn(b2);
    }

    friend bool operator==(const ScorerParams&, const ScorerParams&) = default;
};

inline ScorerParams init_scorer(std::size_t input_dim, std::size_t hidden, RandomStream rng)
{
    ScorerParams p(input_dim, hidden);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (double& w : p.w1) {
        w = s1 * rng.normal();
    }
    for (double& w : p.w2) {
        w = s2 * rng.normal();
    }
    return p;
}

namespace detail {

inline void scorer_hidden(const ScorerParams& p, std::span<const double> x, std::span<double> h)
{
    for (std::size_t j = 0; j < p.hidden; ++j) {
        h[j] = p.b1[j];
    }
    for (std::size_t i = 0; i < p.input_dim; ++i) {
        const double xi = x[i];
        const double* wr = p.w1.data() + i * p.hidden;
        for (std::size_t j = 0; j < p.hidden; ++j) {
            h[j] += xi * wr[j];
        }
    }
    for (std::size_t j = 0; j < p.hidden; ++j) {
        h[j] = sigmoid(h[j]);
    }
}

}  // namespace detail

inline double score(const ScorerParams& p, std::span<const double> x)
{
    require(x.size() == p.input_dim, "score: feature dimension " + std::to_string(x.size()) +
                                         " does not match scorer input " + std::to_string(p.input_dim));
    std::vector<double> h(p.hidden);
    detail::scorer_hidden(p, x, h);
    double phi = p.b2;
    for (std::size_t j = 0; j < p.hidden; ++j) {
        phi += h[j] * p.w2[j];
    }
    return phi;
}

/// Scores every row of a feature matrix.
inline Vector score_rows(const ScorerParams& p, const Matrix& features)
{
    Vector out(features.rows);
    for (std::size_t r = 0; r < features.rows; ++r) {
        out[r] = score(p, features.row(r));
    }
    return out;
}

/// Accumulates dphi * d(phi)/d(params) into `grad` (same shape as `p`).
inline void score_grad(const ScorerParams& p, std::span<const double> x, double dphi, ScorerParams& grad)
{
    require(x.size() == p.input_dim, "score_grad: feature dimension mismatch");
    require(grad.input_dim == p.input_dim && grad.hidden == p.hidden, "score_grad: gradient buffer shape mismatch");
    if (dphi == 0.0) {
        return;
    }
    std::vector<double> h(p.hidden), dz(p.hidden);
    detail::scorer_hidden(p, x, h);
    grad.b2 += dphi;
    for (std::size_t j = 0; j < p.hidden; ++j) {
        grad.w2[j] += dphi * h[j];
        dz[j] = dphi * p.w2[j] * h[j] * (1.0 - h[j]);
        grad.b1[j] += dz[j];
    }
    for (std::size_t i = 0; i < p.input_dim; ++i) {
        const double xi = x[i];
        double* gr = grad.w1.data() + i * p.hidden;
        for (std::size_t j = 0; j < p.hidden; ++j) {
            gr[j] += xi * dz[j];
        }
    }
}

/// One scorer per (layer, KV group), indexed layer * groups + group.
struct ScorerSet {
    std::size_t layers = 0;
    std::size_t groups = 0;
    std::vector<ScorerParams> scorers;

    ScorerParams& at(std::size_t layer, std::size_t group) { return scorers[layer * groups + group]; }
    const ScorerParams& at(std::size_t layer, std::size_t group) const { return scorers[layer * groups + group]; }

    ScorerSet zeros_like() const
    {
        ScorerSet z = *this;
        for (auto& s : z.scorers) {
            s.fill_zero();
        }
        return z;
    }

    friend bool operator==(const ScorerSet&, const ScorerSet&) = default;
};

inline ScorerSet init_scorer_set(std::size_t layers, std::size_t groups, std::size_t input_dim, std::size_t hidden,
                                 std::uint64_t seed)
{
    ScorerSet s{layers, groups, {}};
    const RandomStream root(seed, stream_key({0x73636f726572ULL}));
    for (std::size_t i = 0; i < layers * groups; ++i) {
        s.scorers.push_back(init_scorer(input_dim, hidden, root.derive(i)));
    }
    return s;
}

/// Flat parameter views for optimizers and norms.
inline Vector flatten(const ScorerSet& s)
{
    Vector v;
    for (const auto& p : s.scorers) {
        p.for_each([&](double x) { v.push_back(x); });
    }
    return v;
}

inline void unflatten(std::span<const double> v, ScorerSet& s)
{
    std::size_t i = 0;
    for (auto& p : s.scorers) {
        p.for_each([&](double& x) { x = v[i++]; });
    }
    require(i == v.size(), "unflatten: size mismatch");
}

}  // namespace fkv
