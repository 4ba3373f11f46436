// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fkv/error.hpp"
#include "fkv/kv_cache.hpp"
#include "fkv/model_config.hpp"
#include "fkv/numerics.hpp"

namespace fkv {

struct LayerParams {
    Vector attn_norm;  // hidden
    Matrix wq;         // hidden x (q_heads * D)
    Matrix wk;         // hidden x (kv_heads * D)
    Matrix wv;         // hidden x (kv_heads * D)
    Matrix wo;         // (q_heads * D) x hidden
    Vector mlp_norm;   // hidden
    Matrix w_up;       // hidden x ffn
    Matrix w_down;     // ffn x hidden

    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

/// Frozen decoder weights. Nothing in the library mutates these after creation.
struct ModelParams {
    ModelConfig config;
    Matrix embedding;  // vocab x hidden
    std::vector<LayerParams> layers;
    Vector final_norm;  // hidden
    Matrix unembed;     // hidden x vocab

    friend bool operator==(const ModelParams&, const ModelParams&) = default;

    /// Visits every tensor in checkpoint order.
    template <typename Fn>
    void for_each_tensor(Fn&& fn) { visit(*this, fn); }

    template <typename Fn>
    void for_each_tensor(Fn&& fn) const { visit(*this, fn); }

private:
    template <typename Self, typename Fn>
    static void visit(Self& p, Fn& fn)
    {
        fn(p.embedding.data);
        for (auto& l : p.layers) {
            fn(l.attn_norm);
            fn(l.wq.data);
            fn(l.wk.data);
            fn(l.wv.data);
            fn(l.wo.data);
            fn(l.mlp_norm);
            fn(l.w_up.data);
            fn(l.w_down.data);
        }
        fn(p.final_norm);
        fn(p.unembed.data);
    }
};

/// Allocates zero tensors with the shapes implied by `c`.
inline ModelParams allocate_params(const ModelConfig& c)
{
    c.validate();
    const auto h = static_cast<std::size_t>(c.hidden_dim);
    const auto qd = static_cast<std::size_t>(c.q_heads * c.head_dim);
    const auto kd = static_cast<std::size_t>(c.kv_heads * c.head_dim);
    const auto f = static_cast<std::size_t>(c.ffn_dim);
    ModelParams p;
    p.config = c;
    p.embedding = Matrix(static_cast<std::size_t>(c.vocab_size), h);
    p.layers.resize(static_cast<std::size_t>(c.layers));
    for (auto& l : p.layers) {
        l.attn_norm.assign(h, 1.0);
        l.wq = Matrix(h, qd);
        l.wk = Matrix(h, kd);
        l.wv = Matrix(h, kd);
        l.wo = Matrix(qd, h);
        l.mlp_norm.assign(h, 1.0);
        l.w_up = Matrix(h, f);
        l.w_down = Matrix(f, h);
    }
    p.final_norm.assign(h, 1.0);
    p.unembed = Matrix(h, static_cast<std::size_t>(c.vocab_size));
    return p;
}

/// Scaled-Gaussian initialization from per-tensor derived streams.
inline ModelParams init_params(const ModelConfig& c, std::uint64_t seed)
{
    ModelParams p = allocate_params(c);
    const RandomStream root(seed, stream_key({0x6d6f64656cULL}));
    auto fill = [&](Matrix& m, std::uint64_t tensor_id, double gain) {
        RandomStream rs = root.derive(tensor_id);
        const double sd = gain / std::sqrt(static_cast<double>(m.rows));
        for (double& w : m.data) {
            w = sd * rs.normal();
        }
    };
    {
        RandomStream rs = root.derive(1);
        for (double& w : p.embedding.data) {
            w = rs.normal();
        }
    }
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        auto& l = p.layers[i];
        const std::uint64_t base = 100 + 16 * i;
        fill(l.wq, base + 0, c.qk_gain);
        fill(l.wk, base + 1, c.qk_gain);
        fill(l.wv, base + 2, 1.0);
        fill(l.wo, base + 3, 1.0);
        fill(l.w_up, base + 4, 1.0);
        fill(l.w_down, base + 5, 1.0);
    }
    fill(p.unembed, 2, c.unembed_gain);
    return p;
}

/// FNV-1a over the bit patterns of every parameter.
inline std::uint64_t params_checksum(const ModelParams& p)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    p.for_each_tensor([&](const std::vector<double>& t) {
        for (double v : t) {
            const auto bits = std::bit_cast<std::uint64_t>(v);
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xff;
                h *= 0x100000001b3ULL;
            }
        }
    });
    return h;
}

namespace detail {

inline void rms_norm(std::span<const double> x, std::span<const double> gain, std::span<double> out)
{
    double ss = 0.0;
    for (double v : x) {
        ss += v * v;
    }
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-6);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * inv * gain[i];
    }
}

/// Rotates consecutive (even, odd) pairs of one head vector by position-dependent angles.
inline void apply_rope(std::span<double> head, std::int64_t position, double base)
{
    const std::size_t d = head.size();
    for (std::size_t i = 0; i < d / 2; ++i) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
        const double angle = static_cast<double>(position) * freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double a = head[2 * i];
        const double b = head[2 * i + 1];
        head[2 * i] = a * c - b * s;
        head[2 * i + 1] = a * s + b * c;
    }
}

inline double silu(double x) { return x * sigmoid(x); }

inline void mlp_block(const LayerParams& l, std::span<double> x, std::span<double> scratch_h,
                      std::span<double> scratch_f, std::span<double> scratch_o)
{
    rms_norm(x, l.mlp_norm, scratch_h);
    matvec(scratch_h, l.w_up, scratch_f);
    for (double& v : scratch_f) {
        v = silu(v);
    }
    matvec(scratch_f, l.w_down, scratch_o);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] += scratch_o[i];
    }
}

inline void check_token(const ModelConfig& c, std::int64_t token)
{
    require(token >= 0 && token < c.vocab_size,
            "token " + std::to_string(token) + " out of vocabulary [0, " + std::to_string(c.vocab_size) + ")");
}

}  // namespace detail

/// Lower-triangular T x T attention matrix stored row-packed: row i has i + 1 entries.
class PackedAttention {
public:
    PackedAttention() = default;
    explicit PackedAttention(std::size_t t) : t_(t), data_(t * (t + 1) / 2, 0.0) {}

    /// Packs the lower triangle of a square matrix (entries above the diagonal are dropped).
    static PackedAttention from_matrix(const Matrix& m)
    {
        require(m.rows == m.cols, "PackedAttention::from_matrix: matrix must be square");
        PackedAttention p(m.rows);
        for (std::size_t i = 0; i < m.rows; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                p.row(i)[j] = m(i, j);
            }
        }
        return p;
    }

    std::size_t size() const { return t_; }
    std::span<double> row(std::size_t i) { return {data_.data() + i * (i + 1) / 2, i + 1}; }
    std::span<const double> row(std::size_t i) const { return {data_.data() + i * (i + 1) / 2, i + 1}; }

    /// A[i, j] with the causal zero above the diagonal.
    double at(std::size_t i, std::size_t j) const { return j > i ? 0.0 : data_[i * (i + 1) / 2 + j]; }

private:
    std::size_t t_ = 0;
    std::vector<double> data_;
};

struct ForwardOutput {
    Matrix logits;                            // T x V
    Vector loss;                              // T - 1 entries: -log p(w[t+1] | w[<=t])
    Vector entropy;                           // T entries, nats
    std::vector<PackedAttention> attention;   // [layer * q_heads + head]; empty if not requested
    std::vector<Matrix> keys;                 // [layer * kv_heads + group], T x D, post-rotary
    std::vector<Matrix> values;               // [layer * kv_heads + group], T x D

    const PackedAttention& attn(std::size_t layer, std::size_t head, std::size_t q_heads) const
    {
        return attention[layer * q_heads + head];
    }
};

/// Fills loss/entropy from logits (shared by the full and cached paths).
inline void loss_and_entropy(std::span<const double> logits, std::int64_t next_token, double* loss, double* entropy)
{
    const Vector lp = log_softmax(logits);
    if (entropy != nullptr) {
        double h = 0.0;
        for (double l : lp) {
            h -= std::exp(l) * l;
        }
        *entropy = h;
    }
    if (loss != nullptr) {
        *loss = -lp[static_cast<std::size_t>(next_token)];
    }
}

/**
 * Full causal forward over a whole sequence, layer by layer, with no eviction.
 * Attention matrices are only materialized when `with_attention` is set.
 */
inline ForwardOutput forward_full(const ModelParams& p, std::span<const std::int64_t> tokens, bool with_attention = true)
{
    const ModelConfig& c = p.config;
    const std::size_t T = tokens.size();
    require(T >= 1, "forward_full: empty sequence");
    require(static_cast<std::int64_t>(T) <= c.max_positions,
            "forward_full: sequence length " + std::to_string(T) + " exceeds max_positions " +
                std::to_string(c.max_positions));
    for (auto t : tokens) {
        detail::check_token(c, t);
    }
    const auto H = static_cast<std::size_t>(c.hidden_dim);
    const auto D = static_cast<std::size_t>(c.head_dim);
    const auto QH = static_cast<std::size_t>(c.q_heads);
    const auto KH = static_cast<std::size_t>(c.kv_heads);
    const auto G = static_cast<std::size_t>(c.group_size());
    const double scale = 1.0 / std::sqrt(static_cast<double>(D));

    ForwardOutput out;
    if (with_attention) {
        out.attention.reserve(p.layers.size() * QH);
    }
    Matrix x(T, H);
    for (std::size_t t = 0; t < T; ++t) {
        const auto e = p.embedding.row(static_cast<std::size_t>(tokens[t]));
        std::copy(e.begin(), e.end(), x.row(t).begin());
    }

    Vector hn(H), f(static_cast<std::size_t>(c.ffn_dim)), tmp(H), att(QH * D), scores;
    for (std::size_t li = 0; li < p.layers.size(); ++li) {
        const LayerParams& l = p.layers[li];
        Matrix q(T, QH * D), k(T, KH * D), v(T, KH * D);
        for (std::size_t t = 0; t < T; ++t) {
            detail::rms_norm(x.row(t), l.attn_norm, hn);
            matvec(hn, l.wq, q.row(t));
            matvec(hn, l.wk, k.row(t));
            matvec(hn, l.wv, v.row(t));
            for (std::size_t h = 0; h < QH; ++h) {
                detail::apply_rope(q.row(t).subspan(h * D, D), static_cast<std::int64_t>(t), c.rope_base);
            }
            for (std::size_t g = 0; g < KH; ++g) {
                detail::apply_rope(k.row(t).subspan(g * D, D), static_cast<std::int64_t>(t), c.rope_base);
            }
        }
        std::vector<PackedAttention> layer_attn;
        if (with_attention) {
            layer_attn.assign(QH, PackedAttention(T));
        }
        Matrix o(T, QH * D);
        for (std::size_t h = 0; h < QH; ++h) {
            const std::size_t g = h / G;
            for (std::size_t t = 0; t < T; ++t) {
                scores.resize(t + 1);
                const auto qh = q.row(t).subspan(h * D, D);
                for (std::size_t j = 0; j <= t; ++j) {
                    scores[j] = dot(qh, k.row(j).subspan(g * D, D)) * scale;
                }
                const Vector a = stable_softmax(scores);
                auto oh = o.row(t).subspan(h * D, D);
                for (std::size_t j = 0; j <= t; ++j) {
                    const auto vj = v.row(j).subspan(g * D, D);
                    for (std::size_t d = 0; d < D; ++d) {
                        oh[d] += a[j] * vj[d];
                    }
                }
                if (with_attention) {
                    std::copy(a.begin(), a.end(), layer_attn[h].row(t).begin());
                }
            }
        }
        for (std::size_t t = 0; t < T; ++t) {
            matvec(o.row(t), l.wo, tmp);
            auto xr = x.row(t);
            for (std::size_t i = 0; i < H; ++i) {
                xr[i] += tmp[i];
            }
            detail::mlp_block(l, xr, hn, f, tmp);
        }
        for (std::size_t g = 0; g < KH; ++g) {
            Matrix kg(T, D), vg(T, D);
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t d = 0; d < D; ++d) {
                    kg(t, d) = k(t, g * D + d);
                    vg(t, d) = v(t, g * D + d);
                }
            }
            out.keys.push_back(std::move(kg));
            out.values.push_back(std::move(vg));
        }
        for (auto& a : layer_attn) {
            out.attention.push_back(std::move(a));
        }
    }

    const auto V = static_cast<std::size_t>(c.vocab_size);
    out.logits = Matrix(T, V);
    out.loss.assign(T - 1, 0.0);
    out.entropy.assign(T, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        detail::rms_norm(x.row(t), p.final_norm, hn);
        matvec(hn, p.unembed, out.logits.row(t));
        loss_and_entropy(out.logits.row(t), t + 1 < T ? tokens[t + 1] : 0, t + 1 < T ? &out.loss[t] : nullptr,
                         &out.entropy[t]);
    }
    return out;
}

/// Per-sequence decoding state: one GroupCache per (layer, KV group).
struct DecodeState {
    std::vector<GroupCache> groups;  // [layer * kv_heads + group]
    std::int64_t last_position = -1;

    DecodeState() = default;
    DecodeState(const ModelConfig& c, std::size_t window)
    {
        groups.assign(static_cast<std::size_t>(c.layers * c.kv_heads),
                      GroupCache(static_cast<std::size_t>(c.head_dim), static_cast<std::size_t>(c.group_size()), window));
    }

    GroupCache& group(std::size_t layer, std::size_t g, std::size_t kv_heads) { return groups[layer * kv_heads + g]; }
};

struct StepOutput {
    Vector logits;
    std::vector<Vector> attention;  // [layer * q_heads + head], over the group's entries after append
};

/**
 * One decoding step over the retained caches: appends this token's K/V to every group, then
 * attends over retained + new entries. Rotary phases use original positions.
 */
inline StepOutput forward_step_with_cache(const ModelParams& p, DecodeState& state, std::int64_t token,
                                          std::int64_t position)
{
    const ModelConfig& c = p.config;
    detail::check_token(c, token);
    require(position > state.last_position,
            "forward_step_with_cache: non-monotone position " + std::to_string(position) + " after " +
                std::to_string(state.last_position));
    require(position < c.max_positions, "forward_step_with_cache: position exceeds max_positions");
    require(state.groups.size() == static_cast<std::size_t>(c.layers * c.kv_heads),
            "forward_step_with_cache: decode state does not match model");
    const auto H = static_cast<std::size_t>(c.hidden_dim);
    const auto D = static_cast<std::size_t>(c.head_dim);
    const auto QH = static_cast<std::size_t>(c.q_heads);
    const auto KH = static_cast<std::size_t>(c.kv_heads);
    const auto G = static_cast<std::size_t>(c.group_size());
    const double scale = 1.0 / std::sqrt(static_cast<double>(D));

    StepOutput out;
    out.attention.resize(p.layers.size() * QH);
    const auto e = p.embedding.row(static_cast<std::size_t>(token));
    Vector x(e.begin(), e.end());
    Vector hn(H), f(static_cast<std::size_t>(c.ffn_dim)), tmp(H), q(QH * D), k(KH * D), v(KH * D), o(QH * D), scores;
    for (std::size_t li = 0; li < p.layers.size(); ++li) {
        const LayerParams& l = p.layers[li];
        detail::rms_norm(x, l.attn_norm, hn);
        matvec(hn, l.wq, q);
        matvec(hn, l.wk, k);
        matvec(hn, l.wv, v);
        for (std::size_t h = 0; h < QH; ++h) {
            detail::apply_rope(std::span(q).subspan(h * D, D), position, c.rope_base);
        }
        for (std::size_t g = 0; g < KH; ++g) {
            auto kg = std::span(k).subspan(g * D, D);
            detail::apply_rope(kg, position, c.rope_base);
            state.group(li, g, KH).append(kg, std::span<const double>(v).subspan(g * D, D), position);
        }
        std::fill(o.begin(), o.end(), 0.0);
        for (std::size_t h = 0; h < QH; ++h) {
            const GroupCache& gc = state.group(li, h / G, KH);
            const std::size_t n = gc.size();
            scores.resize(n);
            const auto qh = std::span<const double>(q).subspan(h * D, D);
            for (std::size_t j = 0; j < n; ++j) {
                scores[j] = dot(qh, gc.key(j)) * scale;
            }
            Vector a = stable_softmax(scores);
            auto oh = std::span(o).subspan(h * D, D);
            for (std::size_t j = 0; j < n; ++j) {
                const auto vj = gc.value(j);
                for (std::size_t d = 0; d < D; ++d) {
                    oh[d] += a[j] * vj[d];
                }
            }
            out.attention[li * QH + h] = std::move(a);
        }
        matvec(o, l.wo, tmp);
        for (std::size_t i = 0; i < H; ++i) {
            x[i] += tmp[i];
        }
        detail::mlp_block(l, x, hn, f, tmp);
    }
    detail::rms_norm(x, p.final_norm, hn);
    out.logits.assign(static_cast<std::size_t>(c.vocab_size), 0.0);
    matvec(hn, p.unembed, out.logits);
    state.last_position = position;
    return out;
}

}  // namespace fkv
