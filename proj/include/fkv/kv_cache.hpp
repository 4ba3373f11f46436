// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fkv/error.hpp"
#include "fkv/model_config.hpp"
#include "fkv/numerics.hpp"

namespace fkv {

/// Budget contract: evict down to `budget` whenever a group holds budget + eviction_length pairs.
struct EvictionSchedule {
    std::int64_t budget = 128;
    std::int64_t eviction_length = 32;

    std::int64_t trigger_size() const { return budget + eviction_length; }
    std::int64_t keep_count() const { return budget - eviction_length; }

    void validate() const
    {
        require(eviction_length >= 1 && budget > 2 * eviction_length,
                "EvictionSchedule: requires B > 2L >= 2 (got B=" + std::to_string(budget) +
                    ", L=" + std::to_string(eviction_length) + ")");
    }

    /// Weaker check for offline golden scoring, which never samples from 2L candidates.
    void validate_offline() const
    {
        require(eviction_length >= 1 && budget > eviction_length,
                "EvictionSchedule: requires B > L >= 1 (got B=" + std::to_string(budget) +
                    ", L=" + std::to_string(eviction_length) + ")");
    }

    friend bool operator==(const EvictionSchedule&, const EvictionSchedule&) = default;
};

/// Ring length for recent-query attention: the largest window a feature or baseline reads.
inline std::size_t attention_window_capacity(const EvictionSchedule& s)
{
    return static_cast<std::size_t>(std::max<std::int64_t>(32, s.eviction_length));
}

/**
 * Retained keys/values of one (layer, KV group), with original positions and the
 * per-entry, per-query-head attention bookkeeping used by scorers and baselines.
 *
 * Layout is entry-major: entry n owns keys[n*D, (n+1)*D), cum[n*g, (n+1)*g), and a
 * ring of the last W query rows ring[(n*g + h)*W + (query % W)].
 */
class GroupCache {
public:
    GroupCache() = default;
    GroupCache(std::size_t head_dim, std::size_t heads, std::size_t window)
        : head_dim_(head_dim), heads_(heads), window_(window)
    {
        require(head_dim >= 1 && heads >= 1 && window >= 1, "GroupCache: dims must be >= 1");
    }

    std::size_t size() const { return positions_.size(); }
    bool empty() const { return positions_.empty(); }
    std::size_t head_dim() const { return head_dim_; }
    std::size_t heads() const { return heads_; }
    std::size_t window() const { return window_; }

    std::span<const double> key(std::size_t n) const { return {keys_.data() + n * head_dim_, head_dim_}; }
    std::span<const double> value(std::size_t n) const { return {values_.data() + n * head_dim_, head_dim_}; }
    const std::vector<std::int64_t>& positions() const { return positions_; }
    std::span<const double> keys_flat() const { return keys_; }
    std::span<const double> values_flat() const { return values_; }

    double cum_score(std::size_t n, std::size_t h) const { return cum_[n * heads_ + h]; }
    double decayed_score(std::size_t n, std::size_t h) const { return dec_[n * heads_ + h]; }
    double chunk_score(std::size_t n, std::size_t h) const { return chunk_[n * heads_ + h]; }

    /// Attention of query `query_pos` (head h) to entry n, if still inside the ring.
    double recent_attention(std::size_t n, std::size_t h, std::int64_t query_pos) const
    {
        return ring_[(n * heads_ + h) * window_ + static_cast<std::size_t>(query_pos) % window_];
    }

    /// Sum of head-h attention to entry n over the last `w` queries (w <= window).
    double window_sum(std::size_t n, std::size_t h, std::size_t w) const
    {
        require(w <= window_, "GroupCache::window_sum: window exceeds ring capacity");
        if (last_query_ < 0) {
            return 0.0;
        }
        double s = 0.0;
        for (std::size_t k = 0; k < w && static_cast<std::int64_t>(k) <= last_query_; ++k) {
            s += recent_attention(n, h, last_query_ - static_cast<std::int64_t>(k));
        }
        return s;
    }

    /// Number of queries seen so far (used to cap windows early in a stream).
    std::int64_t queries_seen() const { return last_query_ + 1; }
    std::int64_t last_query() const { return last_query_; }

    void append(std::span<const double> k, std::span<const double> v, std::int64_t position)
    {
        require(k.size() == head_dim_ && v.size() == head_dim_, "GroupCache::append: width mismatch");
        require(positions_.empty() || position > positions_.back(),
                "GroupCache::append: positions must be strictly increasing (last=" +
                    (positions_.empty() ? std::string("none") : std::to_string(positions_.back())) +
                    ", got " + std::to_string(position) + ")");
        keys_.insert(keys_.end(), k.begin(), k.end());
        values_.insert(values_.end(), v.begin(), v.end());
        positions_.push_back(position);
        cum_.resize(cum_.size() + heads_, 0.0);
        dec_.resize(dec_.size() + heads_, 0.0);
        chunk_.resize(chunk_.size() + heads_, 0.0);
        ring_.resize(ring_.size() + heads_ * window_, 0.0);
    }

    /// Records one query's attention rows (one row per group head, each over all entries).
    void record_query(std::int64_t query_pos, std::span<const std::span<const double>> head_rows)
    {
        require(head_rows.size() == heads_, "GroupCache::record_query: head count mismatch");
        require(query_pos == last_query_ + 1, "GroupCache::record_query: query positions must be consecutive from 0 (last=" +
                                                  std::to_string(last_query_) + ", got " + std::to_string(query_pos) + ")");
        const std::size_t slot = static_cast<std::size_t>(query_pos) % window_;
        for (std::size_t h = 0; h < heads_; ++h) {
            require(head_rows[h].size() == size(), "GroupCache::record_query: row length mismatch");
        }
        for (std::size_t n = 0; n < size(); ++n) {
            for (std::size_t h = 0; h < heads_; ++h) {
                const double a = head_rows[h][n];
                ring_[(n * heads_ + h) * window_ + slot] = a;
                chunk_[n * heads_ + h] += a;
            }
        }
        last_query_ = query_pos;
    }

    /// Adds an externally computed chunk contribution per (entry, head) to the open chunk.
    void add_chunk(std::size_t n, std::size_t h, double c) { chunk_[n * heads_ + h] += c; }

    /// Folds the open chunk into the cumulative and decayed sums and starts a new chunk.
    void close_chunk(double decay)
    {
        for (std::size_t i = 0; i < chunk_.size(); ++i) {
            cum_[i] += chunk_[i];
            dec_[i] = decay * dec_[i] + chunk_[i];
            chunk_[i] = 0.0;
        }
    }

    /// Keeps the listed entries (any order, deduplicated by the caller) in original order.
    void compact(const std::vector<std::size_t>& sorted_keep)
    {
        std::vector<double> k, v, c, d, ch, r;
        std::vector<std::int64_t> p;
        k.reserve(sorted_keep.size() * head_dim_);
        v.reserve(sorted_keep.size() * head_dim_);
        for (std::size_t n : sorted_keep) {
            k.insert(k.end(), keys_.begin() + n * head_dim_, keys_.begin() + (n + 1) * head_dim_);
            v.insert(v.end(), values_.begin() + n * head_dim_, values_.begin() + (n + 1) * head_dim_);
            c.insert(c.end(), cum_.begin() + n * heads_, cum_.begin() + (n + 1) * heads_);
            d.insert(d.end(), dec_.begin() + n * heads_, dec_.begin() + (n + 1) * heads_);
            ch.insert(ch.end(), chunk_.begin() + n * heads_, chunk_.begin() + (n + 1) * heads_);
            r.insert(r.end(), ring_.begin() + n * heads_ * window_, ring_.begin() + (n + 1) * heads_ * window_);
            p.push_back(positions_[n]);
        }
        keys_ = std::move(k);
        values_ = std::move(v);
        cum_ = std::move(c);
        dec_ = std::move(d);
        chunk_ = std::move(ch);
        ring_ = std::move(r);
        positions_ = std::move(p);
    }

private:
    std::size_t head_dim_ = 0;
    std::size_t heads_ = 1;
    std::size_t window_ = 32;
    std::vector<double> keys_;
    std::vector<double> values_;
    std::vector<std::int64_t> positions_;
    std::vector<double> cum_;
    std::vector<double> dec_;
    std::vector<double> chunk_;
    std::vector<double> ring_;
    std::int64_t last_query_ = -1;
};

/// Result of one eviction on one group.
struct EvictionOutcome {
    std::vector<std::int64_t> eligible_positions;
    std::vector<std::int64_t> kept_positions;     // survivors among the eligible set
    std::vector<std::int64_t> evicted_positions;
    std::vector<double> evicted_mass_per_head;    // from the most recent query's attention row
};

inline bool eviction_due(const GroupCache& cache, const EvictionSchedule& s)
{
    const auto n = static_cast<std::int64_t>(cache.size());
    if (n > s.trigger_size()) {
        throw Error(ErrorKind::invariant, "missed eviction: group holds " + std::to_string(n) +
                                              " pairs, trigger is " + std::to_string(s.trigger_size()));
    }
    return n == s.trigger_size();
}

/**
 * Evicts all eligible entries not in `keep`. The eligible set is the oldest B entries;
 * the newest L entries always survive. `keep` holds cache indices in [0, B).
 */
inline EvictionOutcome apply_eviction(GroupCache& cache, const EvictionSchedule& s,
                                      std::span<const std::size_t> keep)
{
    s.validate();
    require(static_cast<std::int64_t>(cache.size()) == s.trigger_size(),
            "apply_eviction: cache length must equal B + L");
    require(static_cast<std::int64_t>(keep.size()) == s.keep_count(),
            "apply_eviction: keep set must have exactly B - L entries (got " + std::to_string(keep.size()) + ")");
    const auto eligible = static_cast<std::size_t>(s.budget);
    std::vector<char> kept(eligible, 0);
    for (std::size_t idx : keep) {
        require(idx < eligible, "apply_eviction: keep set intersects the newest-L window");
        require(!kept[idx], "apply_eviction: duplicate index in keep set");
        kept[idx] = 1;
    }

    EvictionOutcome out;
    out.evicted_mass_per_head.assign(cache.heads(), 0.0);
    std::vector<std::size_t> survivors;
    survivors.reserve(cache.size() - static_cast<std::size_t>(s.eviction_length));
    for (std::size_t n = 0; n < eligible; ++n) {
        const auto pos = cache.positions()[n];
        out.eligible_positions.push_back(pos);
        if (kept[n]) {
            survivors.push_back(n);
            out.kept_positions.push_back(pos);
        } else {
            out.evicted_positions.push_back(pos);
            if (cache.last_query() >= 0) {
                for (std::size_t h = 0; h < cache.heads(); ++h) {
                    out.evicted_mass_per_head[h] += cache.recent_attention(n, h, cache.last_query());
                }
            }
        }
    }
    for (std::size_t n = eligible; n < cache.size(); ++n) {
        survivors.push_back(n);
    }
    for (double& e : out.evicted_mass_per_head) {
        e = std::clamp(e, 0.0, 1.0);
    }
    cache.compact(survivors);
    return out;
}

/// Per-sequence KV bytes; `schedule` empty means a full (never evicted) cache.
inline double memory_bytes(const ModelConfig& c, const std::optional<EvictionSchedule>& schedule,
                           std::int64_t seq_len)
{
    require(seq_len >= 0, "memory_bytes: seq_len must be nonnegative");
    const std::int64_t held = schedule ? std::min(seq_len, schedule->trigger_size()) : seq_len;
    return 2.0 * static_cast<double>(c.layers) * static_cast<double>(c.kv_heads) * static_cast<double>(c.head_dim) *
           static_cast<double>(c.dtype_bytes) * static_cast<double>(held);
}

inline std::int64_t max_concurrent(double mem_budget_bytes, double per_sequence_bytes)
{
    require(mem_budget_bytes > 0.0 && per_sequence_bytes > 0.0, "max_concurrent: inputs must be positive");
    return static_cast<std::int64_t>(std::floor(mem_budget_bytes / per_sequence_bytes));
}

}  // namespace fkv
