// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fkv/corpus.hpp"
#include "fkv/error.hpp"
#include "fkv/golden.hpp"
#include "fkv/grpo.hpp"
#include "fkv/kv_cache.hpp"
#include "fkv/model.hpp"
#include "fkv/parallel.hpp"
#include "fkv/policies.hpp"
#include "fkv/stream.hpp"

namespace fkv {

struct EvalOptions {
    std::uint64_t seed = 1234;          // streams of sampling policies
    bool attention_similarity = true;
    std::int64_t similarity_stride = 1;  // every n-th post-eviction position
    double high_entropy_fraction = 0.2;
    double accumulator_decay = 0.9;
};

/// Per-sequence measurements of one policy.
struct SequenceEval {
    std::int64_t id = 0;
    std::size_t positions = 0;  // evaluated (post first eviction) predictions
    double full_loss = 0.0;     // sums over evaluated positions
    double evict_loss = 0.0;
    double full_low = 0.0;
    double evict_low = 0.0;
    double full_high = 0.0;
    double evict_high = 0.0;
    double cosine_sum = 0.0;
    std::size_t cosine_count = 0;
    std::size_t bound_violations = 0;

    double ratio() const { return evict_loss / full_loss; }
};

/// High-entropy bucket: the complement of low_entropy_mask(entropy, 1 - top_fraction).
inline std::vector<std::uint8_t> high_entropy_mask(std::span<const double> entropy, double top_fraction)
{
    auto m = low_entropy_mask(entropy, 1.0 - top_fraction);
    for (auto& v : m) {
        v = v ? 0 : 1;
    }
    return m;
}

/**
 * Runs one policy (nullptr = full cache) over one sequence and compares against its full pass.
 * Attention similarity uses the full pass's rows and values: o over every key, o-hat over the
 * keys the evicted stream still holds, renormalized. Every sample is checked against 2 C eps.
 */
inline SequenceEval evaluate_sequence(const ModelParams& p, const Sequence& seq, const ForwardOutput& full,
                                      const EvictionPolicy* policy, const std::optional<EvictionSchedule>& s,
                                      const EvalOptions& opt)
{
    const ModelConfig& c = p.config;
    const auto T = static_cast<std::int64_t>(seq.tokens.size());
    StreamOptions so;
    so.schedule = policy != nullptr ? s : std::nullopt;
    so.accumulator_decay = opt.accumulator_decay;
    so.record_events = false;
    so.record_retained = opt.attention_similarity;
    const RandomStream rng(opt.seed, stream_key({0x6576616cULL, static_cast<std::uint64_t>(seq.id)}));
    const StreamResult r = run_stream(p, seq.tokens, policy, rng, so);

    // Positions from the first eviction under the schedule; the full-cache row uses the same range.
    std::int64_t first = T;
    if (s) {
        first = std::min<std::int64_t>(T, s->trigger_size());
    }
    SequenceEval ev;
    ev.id = seq.id;
    std::vector<double> ent;
    for (std::int64_t t = first; t + 1 < T; ++t) {
        ent.push_back(full.entropy[static_cast<std::size_t>(t)]);
    }
    const auto high = high_entropy_mask(ent, opt.high_entropy_fraction);
    for (std::int64_t t = first; t + 1 < T; ++t) {
        const auto i = static_cast<std::size_t>(t - first);
        const double lf = full.loss[static_cast<std::size_t>(t)];
        const double le = r.loss[static_cast<std::size_t>(t)];
        ev.full_loss += lf;
        ev.evict_loss += le;
        (high[i] ? ev.full_high : ev.full_low) += lf;
        (high[i] ? ev.evict_high : ev.evict_low) += le;
        ++ev.positions;
    }

    if (!opt.attention_similarity || r.retained.empty()) {
        return ev;
    }
    const auto QH = static_cast<std::size_t>(c.q_heads);
    const auto KH = static_cast<std::size_t>(c.kv_heads);
    const auto G = static_cast<std::size_t>(c.group_size());
    const auto D = static_cast<std::size_t>(c.head_dim);
    const std::int64_t start = r.first_affected_position(T);
    for (std::int64_t q = start; q < T; q += std::max<std::int64_t>(1, opt.similarity_stride)) {
        for (std::size_t l = 0; l < static_cast<std::size_t>(c.layers); ++l) {
            for (std::size_t g = 0; g < KH; ++g) {
                const std::size_t gi = l * KH + g;
                const auto visible = visible_positions(r, gi, q);
                std::vector<char> kept(static_cast<std::size_t>(q) + 1, 0);
                for (auto v : visible) {
                    kept[static_cast<std::size_t>(v)] = 1;
                }
                const Matrix& V = full.values[gi];
                double cmax = 0.0;
                for (std::int64_t j = 0; j <= q; ++j) {
                    cmax = std::max(cmax, norm2(V.row(static_cast<std::size_t>(j))));
                }
                for (std::size_t h = g * G; h < (g + 1) * G; ++h) {
                    const auto row = full.attn(l, h, QH).row(static_cast<std::size_t>(q));
                    Vector o(D, 0.0), kept_sum(D, 0.0);
                    double eps = 0.0;
                    for (std::size_t j = 0; j < row.size(); ++j) {
                        const auto vj = V.row(j);
                        for (std::size_t d = 0; d < D; ++d) {
                            o[d] += row[j] * vj[d];
                        }
                        if (kept[j]) {
                            for (std::size_t d = 0; d < D; ++d) {
                                kept_sum[d] += row[j] * vj[d];
                            }
                        } else {
                            eps += row[j];
                        }
                    }
                    require(eps < 1.0, "evaluate_sequence: all attention mass evicted", ErrorKind::invariant);
                    for (double& x : kept_sum) {
                        x /= 1.0 - eps;
                    }
                    ev.cosine_sum += cosine_similarity(o, kept_sum);
                    ++ev.cosine_count;
                    ev.bound_violations += check_bound(o, kept_sum, eps, cmax) ? 0 : 1;
                }
            }
        }
    }
    return ev;
}

struct PolicyReport {
    std::string policy;
    std::optional<EvictionSchedule> schedule;
    std::size_t sequences = 0;
    std::size_t skipped = 0;
    double loss_ratio = 1.0;         // mean of per-sequence ratios
    double pooled_loss_ratio = 1.0;  // sum evicted / sum full over the corpus
    double low_entropy_ratio = 1.0;
    double high_entropy_ratio = 1.0;
    double attention_cosine = 1.0;
    std::size_t bound_checks = 0;
    std::size_t bound_violations = 0;
    std::vector<SequenceEval> per_sequence;
};

/// Aggregates per-sequence results in sequence order.
inline PolicyReport aggregate(std::string name, const std::optional<EvictionSchedule>& s, std::vector<SequenceEval> rows,
                              std::size_t skipped)
{
    PolicyReport r;
    r.policy = std::move(name);
    r.schedule = s;
    r.sequences = rows.size();
    r.skipped = skipped;
    double fl = 0, el = 0, flo = 0, elo = 0, fh = 0, eh = 0, cs = 0, mean_ratio = 0;
    std::size_t cc = 0;
    for (const auto& e : rows) {
        fl += e.full_loss;
        el += e.evict_loss;
        flo += e.full_low;
        elo += e.evict_low;
        fh += e.full_high;
        eh += e.evict_high;
        cs += e.cosine_sum;
        cc += e.cosine_count;
        r.bound_violations += e.bound_violations;
        mean_ratio += e.ratio();
    }
    if (!rows.empty()) {
        r.loss_ratio = mean_ratio / static_cast<double>(rows.size());
        r.pooled_loss_ratio = el / fl;
        r.low_entropy_ratio = flo > 0 ? elo / flo : 1.0;
        r.high_entropy_ratio = fh > 0 ? eh / fh : 1.0;
    }
    r.attention_cosine = cc > 0 ? cs / static_cast<double>(cc) : 1.0;
    r.bound_checks = cc;
    r.per_sequence = std::move(rows);
    return r;
}

/// Named policy slot for a suite run. The golden policy is built per sequence from its full pass.
struct PolicySpec {
    std::string name;
    enum class Kind { full, golden, h2o, snapkv, rkv, learned } kind = Kind::full;
    const ScorerSet* scorers = nullptr;
    LearnedPolicyOptions learned;
    std::size_t window = 8;
    double rkv_weight = 0.1;
};

inline std::unique_ptr<EvictionPolicy> make_policy(const PolicySpec& ps, const ForwardOutput& full, const ModelConfig& c,
                                                   const EvictionSchedule& s)
{
    using K = PolicySpec::Kind;
    switch (ps.kind) {
    case K::full:
        return nullptr;
    case K::golden:
        return std::make_unique<GoldenPolicy>(make_golden_policy(full, c, s));
    case K::h2o:
        return std::make_unique<H2OPolicy>();
    case K::snapkv:
        return std::make_unique<SnapKVPolicy>(ps.window);
    case K::rkv:
        return std::make_unique<RKVPolicy>(ps.window, ps.rkv_weight);
    case K::learned:
        require(ps.scorers != nullptr, "make_policy: learned policy without scorers");
        return std::make_unique<LearnedPolicy>(ps.scorers, ps.learned, ps.name);
    }
    return nullptr;
}

/**
 * Evaluates every policy on every sequence, one full pass per sequence.
 * Sequences not longer than B + L are skipped and counted.
 */
inline std::vector<PolicyReport> evaluate_suite(const ModelParams& p, const std::vector<Sequence>& corpus,
                                                const std::vector<PolicySpec>& policies, const EvictionSchedule& s,
                                                const EvalOptions& opt, std::size_t threads = 1)
{
    s.validate();
    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (static_cast<std::int64_t>(corpus[i].tokens.size()) > s.trigger_size()) {
            usable.push_back(i);
        }
    }
    const std::size_t skipped = corpus.size() - usable.size();
    std::vector<std::vector<SequenceEval>> rows(policies.size(), std::vector<SequenceEval>(usable.size()));
    parallel_for(usable.size(), threads, [&](std::size_t u) {
        const Sequence& seq = corpus[usable[u]];
        const ForwardOutput full = forward_full(p, seq.tokens, true);
        for (std::size_t k = 0; k < policies.size(); ++k) {
            const auto pol = make_policy(policies[k], full, p.config, s);
            rows[k][u] = evaluate_sequence(p, seq, full, pol.get(), s, opt);
        }
    });
    std::vector<PolicyReport> out;
    for (std::size_t k = 0; k < policies.size(); ++k) {
        out.push_back(aggregate(policies[k].name, policies[k].kind == PolicySpec::Kind::full
                                                      ? std::optional<EvictionSchedule>{}
                                                      : std::optional<EvictionSchedule>{s},
                                std::move(rows[k]), skipped));
    }
    return out;
}

struct CapacityRow {
    std::string label;  // "full" or "B=...,L=..."
    std::int64_t seq_len = 0;
    double bytes = 0.0;
    std::int64_t max_concurrent = 0;
    double ratio_vs_full = 1.0;  // concurrency relative to the full cache at the same length
};

inline std::vector<CapacityRow> capacity_table(const ModelConfig& c, const std::vector<EvictionSchedule>& budgets,
                                               const std::vector<std::int64_t>& seq_lens, double mem_budget_bytes)
{
    std::vector<CapacityRow> rows;
    for (auto T : seq_lens) {
        const double full = memory_bytes(c, std::nullopt, T);
        const auto full_n = max_concurrent(mem_budget_bytes, full);
        rows.push_back({"full", T, full, full_n, 1.0});
        for (const auto& s : budgets) {
            const double b = memory_bytes(c, s, T);
            const auto n = max_concurrent(mem_budget_bytes, b);
            rows.push_back({"B=" + std::to_string(s.budget) + ",L=" + std::to_string(s.eviction_length), T, b, n,
                            full_n > 0 ? static_cast<double>(n) / static_cast<double>(full_n) : 0.0});
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------------------------
// Report formatting.

inline std::string fmt_double(double v, int digits = 10)
{
    if (std::isnan(v)) {
        return "nan";
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
    return buf;
}

inline const char* kReportColumns =
    "policy,budget,eviction_length,sequences,skipped,loss_ratio,pooled_loss_ratio,low_entropy_ratio,"
    "high_entropy_ratio,attention_cosine,bound_checks,bound_violations,seed";

/// First line of every CSV artifact: "# fkv-<kind> v<version>".
inline std::string csv_version_line(const std::string& kind, int version)
{
    return "# fkv-" + kind + " v" + std::to_string(version) + "\n";
}

inline void check_csv_version(const std::string& line, const std::string& kind, int max_version, const std::string& name)
{
    const std::string prefix = "# fkv-" + kind + " v";
    if (line.rfind(prefix, 0) != 0) {
        throw Error(ErrorKind::format, name + ": missing '" + kind + "' header");
    }
    int v = 0;
    try {
        v = std::stoi(line.substr(prefix.size()));
    } catch (const std::exception&) {
        v = 0;
    }
    if (v < 1 || v > max_version) {
        throw Error(ErrorKind::format, name + ": unsupported version in '" + line + "'");
    }
}

inline std::string report_csv(const std::vector<PolicyReport>& reports, std::uint64_t seed)
{
    std::string out = csv_version_line("report", 1) + kReportColumns + "\n";
    for (const auto& r : reports) {
        out += r.policy + "," + (r.schedule ? std::to_string(r.schedule->budget) : "") + "," +
               (r.schedule ? std::to_string(r.schedule->eviction_length) : "") + "," + std::to_string(r.sequences) +
               "," + std::to_string(r.skipped) + "," + fmt_double(r.loss_ratio) + "," +
               fmt_double(r.pooled_loss_ratio) + "," + fmt_double(r.low_entropy_ratio) + "," +
               fmt_double(r.high_entropy_ratio) + "," + fmt_double(r.attention_cosine) + "," +
               std::to_string(r.bound_checks) + "," + std::to_string(r.bound_violations) + "," +
               std::to_string(seed) + "\n";
    }
    return out;
}

inline std::string report_text(const std::vector<PolicyReport>& reports)
{
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-10s %9s %7s %7s %7s %7s %9s\n", "policy", "schedule", "ratio", "pooled",
                  "low", "high", "attn_cos");
    out += buf;
    for (const auto& r : reports) {
        const std::string sched =
            r.schedule ? std::to_string(r.schedule->budget) + "/" + std::to_string(r.schedule->eviction_length) : "-";
        std::snprintf(buf, sizeof(buf), "%-10s %9s %7.4f %7.4f %7.4f %7.4f %9.4f\n", r.policy.c_str(), sched.c_str(),
                      r.loss_ratio, r.pooled_loss_ratio, r.low_entropy_ratio, r.high_entropy_ratio,
                      r.attention_cosine);
        out += buf;
    }
    return out;
}

inline std::string per_sequence_csv(const std::vector<PolicyReport>& reports)
{
    std::string out = csv_version_line("report-sequences", 1) + "policy,sequence,positions,loss_ratio\n";
    for (const auto& r : reports) {
        for (const auto& e : r.per_sequence) {
            out += r.policy + "," + std::to_string(e.id) + "," + std::to_string(e.positions) + "," +
                   fmt_double(e.ratio()) + "\n";
        }
    }
    return out;
}

inline std::string capacity_csv(const std::vector<CapacityRow>& rows)
{
    std::string out = csv_version_line("capacity", 1) + "config,seq_len,bytes,max_concurrent,ratio_vs_full\n";
    for (const auto& r : rows) {
        out += "\"" + r.label + "\"," + std::to_string(r.seq_len) + "," + fmt_double(r.bytes, 12) + "," +
               std::to_string(r.max_concurrent) + "," + fmt_double(r.ratio_vs_full) + "\n";
    }
    return out;
}

/// Parsed report CSV: rows of name -> value keyed by "policy@budget/L".
struct ParsedReport {
    std::vector<std::string> keys;
    std::map<std::string, std::map<std::string, std::string>> cells;
};

inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (char ch : line) {
        if (ch == '"') {
            quoted = !quoted;
        } else if (ch == ',' && !quoted) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

inline ParsedReport parse_report_csv(const std::string& text, const std::string& name)
{
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) {
        throw Error(ErrorKind::format, name + ": empty file");
    }
    check_csv_version(line, "report", 1, name);
    if (!std::getline(in, line) || line != kReportColumns) {
        throw Error(ErrorKind::format, name + ": not an eval report (unexpected header)");
    }
    const auto cols = split_csv_line(line);
    ParsedReport r;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const auto cells = split_csv_line(line);
        if (cells.size() != cols.size()) {
            throw Error(ErrorKind::format, name + ": ragged row");
        }
        const std::string key = cells[0] + "@" + cells[1] + "/" + cells[2];
        r.keys.push_back(key);
        for (std::size_t i = 0; i < cols.size(); ++i) {
            r.cells[key][cols[i]] = cells[i];
        }
    }
    return r;
}

/// Per-cell deltas (b - a) for shared rows, then the loss-ratio ordering of each report.
inline std::string compare_reports(const ParsedReport& a, const ParsedReport& b)
{
    static const std::vector<std::string> metrics = {"loss_ratio", "pooled_loss_ratio", "low_entropy_ratio",
                                                     "high_entropy_ratio", "attention_cosine"};
    std::string out = "row,metric,a,b,delta\n";
    for (const auto& key : a.keys) {
        if (!b.cells.count(key)) {
            continue;
        }
        for (const auto& m : metrics) {
            const double va = std::stod(a.cells.at(key).at(m));
            const double vb = std::stod(b.cells.at(key).at(m));
            out += key + "," + m + "," + fmt_double(va) + "," + fmt_double(vb) + "," + fmt_double(vb - va) + "\n";
        }
    }
    auto ordering = [](const ParsedReport& r) {
        std::vector<std::pair<double, std::string>> v;
        for (const auto& k : r.keys) {
            v.emplace_back(std::stod(r.cells.at(k).at("loss_ratio")), k);
        }
        std::stable_sort(v.begin(), v.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
        std::vector<std::string> names;
        for (auto& [_, k] : v) {
            names.push_back(k);
        }
        return names;
    };
    auto oa = ordering(a);
    auto ob = ordering(b);
    auto keep_shared = [&](std::vector<std::string>& o, const ParsedReport& other) {
        std::erase_if(o, [&](const std::string& k) { return !other.cells.count(k); });
    };
    keep_shared(oa, b);
    keep_shared(ob, a);
    auto join = [](const std::vector<std::string>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) {
            s += (i ? " < " : "") + v[i];
        }
        return s;
    };
    out += "# ordering a: " + join(oa) + "\n";
    out += "# ordering b: " + join(ob) + "\n";
    out += std::string("# ordering_changed: ") + (oa == ob ? "no" : "yes") + "\n";
    return out;
}

}  // namespace fkv
