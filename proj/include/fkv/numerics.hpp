// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "fkv/error.hpp"

namespace fkv {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// y = x * W for a row vector x (W is in x out). Accumulation order is fixed (row by row).
inline void matvec(std::span<const double> x, const Matrix& w, std::span<double> y)
{
    require(x.size() == w.rows && y.size() == w.cols, "matvec: shape mismatch");
    std::fill(y.begin(), y.end(), 0.0);
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double xi = x[i];
        const double* wr = w.data.data() + i * w.cols;
        for (std::size_t j = 0; j < w.cols; ++j) {
            y[j] += xi * wr[j];
        }
    }
}

inline double dot(std::span<const double> a, std::span<const double> b)
{
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Max-subtracted softmax. The result sums to one.
inline Vector stable_softmax(std::span<const double> logits)
{
    require(!logits.empty(), "empty distribution");
    const double mx = *std::max_element(logits.begin(), logits.end());
    Vector out(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        z += out[i];
    }
    for (double& p : out) {
        p /= z;
    }
    return out;
}

/// Natural-log softmax, computed without forming probabilities first.
inline Vector log_softmax(std::span<const double> logits)
{
    require(!logits.empty(), "empty distribution");
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) {
        z += std::exp(v - mx);
    }
    const double lse = mx + std::log(z);
    Vector out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = logits[i] - lse;
    }
    return out;
}

/// Shannon entropy in nats with 0 ln 0 = 0.
inline double entropy_nats(std::span<const double> p)
{
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) {
            h -= v * std::log(v);
        }
    }
    return h;
}

/// Cosine similarity; 0 when either vector has norm below 1e-12.
inline double cosine_similarity(std::span<const double> u, std::span<const double> v)
{
    require(u.size() == v.size(), "cosine_similarity: length mismatch");
    const double nu = norm2(u);
    const double nv = norm2(v);
    if (nu < 1e-12 || nv < 1e-12) {
        return 0.0;
    }
    return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

/// Column-wise mean over the first `valid_row_count` rows; the remaining rows are padding.
inline Vector avg_pool_rows(const Matrix& m, std::size_t valid_row_count)
{
    require(valid_row_count >= 1, "avg_pool_rows: valid_row_count must be >= 1");
    require(valid_row_count <= m.rows, "avg_pool_rows: valid_row_count exceeds row count");
    Vector out(m.cols, 0.0);
    for (std::size_t r = 0; r < valid_row_count; ++r) {
        const auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols; ++c) {
            out[c] += row[c];
        }
    }
    for (double& v : out) {
        v /= static_cast<double>(valid_row_count);
    }
    return out;
}

inline double sigmoid(double z)
{
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Folds a list of integers into a stream id.
inline std::uint64_t stream_key(std::initializer_list<std::uint64_t> parts)
{
    std::uint64_t h = 0x243F6A8885A308D3ULL;
    for (std::uint64_t p : parts) {
        h = splitmix64(h ^ splitmix64(p));
    }
    return h;
}

/**
 * Counter-based random stream (Philox4x32-10 keyed by the seed).
 *
 * Draw k of stream (seed, stream_id) is a pure function of the triple, so streams for
 * workers, trajectories or cache groups are obtained by picking stream ids rather than
 * by consuming a shared generator.
 */
class RandomStream {
public:
    RandomStream() = default;
    RandomStream(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t counter = 0)
        : seed_(seed), stream_(stream_id), counter_(counter)
    {
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_; }
    std::uint64_t counter() const { return counter_; }

    RandomStream derive(std::uint64_t sub) const { return {seed_, stream_key({stream_, sub}), 0}; }

    std::uint64_t next_u64()
    {
        auto block = philox(counter_++);
        return (static_cast<std::uint64_t>(block[0]) << 32) | block[1];
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double normal()
    {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n)
    {
        require(n > 0, "RandomStream::below: n must be positive");
        // Reject the top partial range so the modulo is unbiased.
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x = next_u64();
        while (x >= limit) {
            x = next_u64();
        }
        return x % n;
    }

    friend bool operator==(const RandomStream&, const RandomStream&) = default;

private:
    using Block = std::array<std::uint32_t, 4>;

    Block philox(std::uint64_t ctr) const
    {
        constexpr std::uint32_t m0 = 0xD2511F53u;
        constexpr std::uint32_t m1 = 0xCD9E8D57u;
        constexpr std::uint32_t w0 = 0x9E3779B9u;
        constexpr std::uint32_t w1 = 0xBB67AE85u;
        Block c{static_cast<std::uint32_t>(ctr), static_cast<std::uint32_t>(ctr >> 32),
                static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
        std::uint32_t k0 = static_cast<std::uint32_t>(seed_);
        std::uint32_t k1 = static_cast<std::uint32_t>(seed_ >> 32);
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = static_cast<std::uint64_t>(m0) * c[0];
            const std::uint64_t p1 = static_cast<std::uint64_t>(m1) * c[2];
            c = {static_cast<std::uint32_t>(p1 >> 32) ^ c[1] ^ k0, static_cast<std::uint32_t>(p1),
                 static_cast<std::uint32_t>(p0 >> 32) ^ c[3] ^ k1, static_cast<std::uint32_t>(p0)};
            k0 += w0;
            k1 += w1;
        }
        return c;
    }

    std::uint64_t seed_ = 0;
    std::uint64_t stream_ = 0;
    std::uint64_t counter_ = 0;
};

/// Inverse-CDF categorical draw with one uniform; boundary ties go to the lower index.
inline std::size_t draw_categorical(std::span<const double> probs, double u)
{
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u <= acc && probs[i] > 0.0) {
            return i;
        }
    }
    // Rounding can leave acc slightly below 1; fall back to the last nonzero entry.
    for (std::size_t i = probs.size(); i-- > 0;) {
        if (probs[i] > 0.0) {
            return i;
        }
    }
    return probs.size() - 1;
}

}  // namespace fkv
