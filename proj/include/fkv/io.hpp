// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fkv/corpus.hpp"
#include "fkv/error.hpp"
#include "fkv/grpo.hpp"
#include "fkv/model.hpp"
#include "fkv/scorer.hpp"
#include "fkv/sft.hpp"

namespace fkv {

using json = nlohmann::json;

namespace fs = std::filesystem;

/// Writes `bytes` to `path` through a sibling temp file and a rename.
inline void write_atomic(const fs::path& path, std::string_view bytes)
{
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), "cannot open " + tmp.string() + " for writing", ErrorKind::invariant);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        require(static_cast<bool>(out), "short write to " + tmp.string(), ErrorKind::invariant);
    }
    fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path, const std::string& producer_stage = "")
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        std::string msg = "missing artifact " + path.string();
        if (!producer_stage.empty()) {
            msg += " (run the '" + producer_stage + "' stage first)";
        }
        throw Error(ErrorKind::missing_artifact, msg);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------------------------
// Binary containers: 4-byte magic, u32 version, little-endian payload.

class BinaryWriter {
public:
    explicit BinaryWriter(std::string_view magic, std::uint32_t version)
    {
        require(magic.size() == 4, "BinaryWriter: magic must be 4 bytes");
        buf_.append(magic);
        u32(version);
    }

    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i) {
            buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
        }
    }
    void u64(std::uint64_t v)
    {
        for (int i = 0; i < 8; ++i) {
            buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
        }
    }
    void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void doubles(std::span<const double> v)
    {
        u64(v.size());
        for (double x : v) {
            f64(x);
        }
    }
    void ints(std::span<const std::int64_t> v)
    {
        u64(v.size());
        for (auto x : v) {
            i64(x);
        }
    }

    const std::string& bytes() const { return buf_; }

private:
    std::string buf_;
};

class BinaryReader {
public:
    BinaryReader(std::string data, std::string_view magic, std::uint32_t max_version, std::string name)
        : data_(std::move(data)), name_(std::move(name))
    {
        if (data_.size() < 8 || std::string_view(data_).substr(0, 4) != magic) {
            throw Error(ErrorKind::format, name_ + ": not a " + std::string(magic) + " file");
        }
        pos_ = 4;
        version_ = u32();
        if (version_ == 0 || version_ > max_version) {
            throw Error(ErrorKind::format, name_ + ": unsupported version " + std::to_string(version_));
        }
    }

    std::uint32_t version() const { return version_; }

    std::uint32_t u32()
    {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += 4;
        return v;
    }
    std::uint64_t u64()
    {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += 8;
        return v;
    }
    std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
    double f64() { return std::bit_cast<double>(u64()); }
    Vector doubles()
    {
        const auto n = count(8);
        Vector v(n);
        for (auto& x : v) {
            x = f64();
        }
        return v;
    }
    std::vector<std::int64_t> ints()
    {
        const auto n = count(8);
        std::vector<std::int64_t> v(n);
        for (auto& x : v) {
            x = i64();
        }
        return v;
    }
    void finish() const
    {
        if (pos_ != data_.size()) {
            throw Error(ErrorKind::format, name_ + ": trailing bytes");
        }
    }

private:
    std::size_t count(std::size_t elem)
    {
        const std::uint64_t n = u64();
        if (n > (data_.size() - pos_) / elem) {
            throw Error(ErrorKind::format, name_ + ": truncated array");
        }
        return static_cast<std::size_t>(n);
    }
    void need(std::size_t n) const
    {
        if (data_.size() - pos_ < n) {
            throw Error(ErrorKind::format, name_ + ": truncated file");
        }
    }

    std::string data_;
    std::string name_;
    std::size_t pos_ = 0;
    std::uint32_t version_ = 0;
};

constexpr std::uint32_t kModelVersion = 1;
constexpr std::uint32_t kScorerVersion = 1;
constexpr std::uint32_t kLabelVersion = 1;

inline void write_config(BinaryWriter& w, const ModelConfig& c)
{
    for (auto v : {c.vocab_size, c.layers, c.q_heads, c.kv_heads, c.head_dim, c.hidden_dim, c.ffn_dim,
                   c.max_positions, c.dtype_bytes}) {
        w.i64(v);
    }
    for (auto v : {c.qk_gain, c.unembed_gain, c.rope_base}) {
        w.f64(v);
    }
}

inline ModelConfig read_config(BinaryReader& r)
{
    ModelConfig c;
    for (auto* v : {&c.vocab_size, &c.layers, &c.q_heads, &c.kv_heads, &c.head_dim, &c.hidden_dim, &c.ffn_dim,
                    &c.max_positions, &c.dtype_bytes}) {
        *v = r.i64();
    }
    for (auto* v : {&c.qk_gain, &c.unembed_gain, &c.rope_base}) {
        *v = r.f64();
    }
    c.validate();
    return c;
}

/// Model checkpoint "FKVM": config, then every tensor in for_each_tensor order.
inline std::string encode_model(const ModelParams& p)
{
    BinaryWriter w("FKVM", kModelVersion);
    write_config(w, p.config);
    p.for_each_tensor([&](const std::vector<double>& t) { w.doubles(t); });
    return w.bytes();
}

inline ModelParams decode_model(std::string bytes, const std::string& name = "model checkpoint")
{
    BinaryReader r(std::move(bytes), "FKVM", kModelVersion, name);
    ModelParams p = allocate_params(read_config(r));
    p.for_each_tensor([&](std::vector<double>& t) {
        Vector v = r.doubles();
        if (v.size() != t.size()) {
            throw Error(ErrorKind::format, name + ": tensor size does not match the stored config");
        }
        t = std::move(v);
    });
    r.finish();
    return p;
}

/// Scorer checkpoint "FKVS": set shape, then each scorer's parameters (w1, b1, w2, b2).
inline std::string encode_scorers(const ScorerSet& s)
{
    BinaryWriter w("FKVS", kScorerVersion);
    w.u64(s.layers);
    w.u64(s.groups);
    w.u64(s.scorers.size());
    for (const auto& p : s.scorers) {
        w.u64(p.input_dim);
        w.u64(p.hidden);
        w.doubles(p.w1);
        w.doubles(p.b1);
        w.doubles(p.w2);
        w.f64(p.b2);
    }
    return w.bytes();
}

inline ScorerSet decode_scorers(std::string bytes, const std::string& name = "scorer checkpoint")
{
    BinaryReader r(std::move(bytes), "FKVS", kScorerVersion, name);
    ScorerSet s;
    s.layers = r.u64();
    s.groups = r.u64();
    const auto n = r.u64();
    if (n != s.layers * s.groups) {
        throw Error(ErrorKind::format, name + ": scorer count does not match layers x groups");
    }
    for (std::uint64_t i = 0; i < n; ++i) {
        const auto in = r.u64();
        const auto h = r.u64();
        ScorerParams p(in, h);
        p.w1 = r.doubles();
        p.b1 = r.doubles();
        p.w2 = r.doubles();
        p.b2 = r.f64();
        if (p.w1.size() != in * h || p.b1.size() != h || p.w2.size() != h) {
            throw Error(ErrorKind::format, name + ": scorer tensor shape mismatch");
        }
        s.scorers.push_back(std::move(p));
    }
    r.finish();
    return s;
}

/// Label container "FKVL": schedule, shape, then every state with alpha and features.
inline std::string encode_labels(const LabelSet& l)
{
    BinaryWriter w("FKVL", kLabelVersion);
    w.i64(l.schedule.budget);
    w.i64(l.schedule.eviction_length);
    w.u64(l.layers);
    w.u64(l.groups);
    w.u64(l.feature_dim);
    w.u64(l.states.size());
    for (const auto& st : l.states) {
        w.i64(st.sequence);
        w.i64(st.step);
        w.u64(st.layer);
        w.u64(st.group);
        w.ints(st.positions);
        w.doubles(st.alpha);
        w.u64(st.features.rows);
        w.doubles(st.features.data);
    }
    return w.bytes();
}

inline LabelSet decode_labels(std::string bytes, const std::string& name = "label file")
{
    BinaryReader r(std::move(bytes), "FKVL", kLabelVersion, name);
    LabelSet l;
    l.schedule.budget = r.i64();
    l.schedule.eviction_length = r.i64();
    l.layers = r.u64();
    l.groups = r.u64();
    l.feature_dim = r.u64();
    const auto n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
        LabelState st;
        st.sequence = r.i64();
        st.step = r.i64();
        st.layer = r.u64();
        st.group = r.u64();
        st.positions = r.ints();
        st.alpha = r.doubles();
        const auto rows = r.u64();
        st.features.rows = rows;
        st.features.cols = l.feature_dim;
        st.features.data = r.doubles();
        if (st.alpha.size() != st.positions.size() || rows != st.positions.size() ||
            st.features.data.size() != rows * l.feature_dim || st.layer >= l.layers || st.group >= l.groups) {
            throw Error(ErrorKind::format, name + ": inconsistent label state");
        }
        l.states.push_back(std::move(st));
    }
    r.finish();
    return l;
}

// ---------------------------------------------------------------------------------------------
// JSON-lines: the first line is a header object with "format" and "version".

inline json jsonl_header(const std::string& format, int version) { return json{{"format", format}, {"version", version}}; }

/// Splits a JSON-lines file and checks its header.
inline std::vector<json> parse_jsonl(const std::string& text, const std::string& format, int max_version,
                                     const std::string& name)
{
    std::vector<json> rows;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        try {
            rows.push_back(json::parse(line));
        } catch (const json::exception& e) {
            throw Error(ErrorKind::format, name + ": bad JSON line: " + e.what());
        }
    }
    if (rows.empty() || !rows.front().is_object() || rows.front().value("format", "") != format) {
        throw Error(ErrorKind::format, name + ": missing '" + format + "' header");
    }
    const int v = rows.front().value("version", 0);
    if (v < 1 || v > max_version) {
        throw Error(ErrorKind::format, name + ": unsupported version " + std::to_string(v));
    }
    return rows;
}

inline std::string encode_corpus(const std::vector<Sequence>& corpus, const json& spec)
{
    std::string out = json{{"format", "fkv-corpus"}, {"version", 1}, {"spec", spec}}.dump() + "\n";
    for (const auto& s : corpus) {
        out += json{{"id", s.id}, {"tokens", s.tokens}, {"recalled", s.recalled}}.dump() + "\n";
    }
    return out;
}

inline std::vector<Sequence> decode_corpus(const std::string& text, const std::string& name = "corpus")
{
    const auto rows = parse_jsonl(text, "fkv-corpus", 1, name);
    std::vector<Sequence> out;
    try {
        for (std::size_t i = 1; i < rows.size(); ++i) {
            Sequence s;
            s.id = rows[i].at("id").get<std::int64_t>();
            s.tokens = rows[i].at("tokens").get<std::vector<std::int64_t>>();
            s.recalled = rows[i].at("recalled").get<std::vector<std::uint8_t>>();
            out.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw Error(ErrorKind::format, name + ": " + e.what());
    }
    return out;
}

/// One line per golden step of one (layer, group).
inline std::string golden_trace_line(std::int64_t seq, const EvictionEvent& ev)
{
    return json{{"sequence", seq},
                {"step", ev.step},
                {"layer", ev.layer},
                {"group", ev.group},
                {"position", ev.position},
                {"eligible", ev.outcome.eligible_positions},
                {"alpha", ev.scores},
                {"kept", ev.outcome.kept_positions},
                {"evicted", ev.outcome.evicted_positions}}
               .dump() +
           "\n";
}

/// Stored trajectory plus the full-cache vectors its reward was computed from.
struct TrajectoryRecord {
    Trajectory trajectory;
    Vector loss_ori;
    Vector entropy_ori;
};

inline std::string encode_trajectories(std::span<const TrajectoryRecord> recs, bool with_features)
{
    std::string out = jsonl_header("fkv-trajectory", 1).dump() + "\n";
    for (const auto& rec : recs) {
        const Trajectory& t = rec.trajectory;
        for (const auto& ev : t.events) {
            json j{{"type", "event"},
                   {"sequence", t.sequence},
                   {"trajectory", t.index},
                   {"step", ev.step},
                   {"layer", ev.layer},
                   {"group", ev.group},
                   {"position", ev.position},
                   {"candidates", ev.action.candidates},
                   {"candidate_positions", ev.candidate_positions},
                   {"drawn", ev.action.drawn},
                   {"logprob_old", ev.action.logprob}};
            if (with_features) {
                j["feature_dim"] = ev.features.cols;
                j["features"] = ev.features.data;
            }
            out += j.dump() + "\n";
        }
        out += json{{"type", "footer"},
                    {"sequence", t.sequence},
                    {"trajectory", t.index},
                    {"events", t.events.size()},
                    {"reward", t.reward},
                    {"advantage", t.advantage},
                    {"loss_ori", rec.loss_ori},
                    {"loss_evict", t.loss_evict},
                    {"entropy_ori", rec.entropy_ori}}
                   .dump() +
               "\n";
    }
    return out;
}

inline std::vector<TrajectoryRecord> decode_trajectories(const std::string& text, const std::string& name = "trajectories")
{
    const auto rows = parse_jsonl(text, "fkv-trajectory", 1, name);
    std::vector<TrajectoryRecord> out;
    TrajectoryRecord cur;
    try {
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const json& j = rows[i];
            if (j.at("type") == "event") {
                TrajectoryEvent ev;
                ev.step = j.at("step").get<std::int64_t>();
                ev.layer = j.at("layer").get<std::size_t>();
                ev.group = j.at("group").get<std::size_t>();
                ev.position = j.at("position").get<std::int64_t>();
                ev.action.candidates = j.at("candidates").get<std::vector<std::size_t>>();
                ev.candidate_positions = j.at("candidate_positions").get<std::vector<std::int64_t>>();
                ev.action.drawn = j.at("drawn").get<std::vector<std::size_t>>();
                ev.action.logprob = j.at("logprob_old").get<double>();
                if (j.contains("features")) {
                    ev.features.cols = j.at("feature_dim").get<std::size_t>();
                    ev.features.data = j.at("features").get<Vector>();
                    ev.features.rows = ev.features.cols == 0 ? 0 : ev.features.data.size() / ev.features.cols;
                }
                cur.trajectory.events.push_back(std::move(ev));
            } else {
                cur.trajectory.sequence = j.at("sequence").get<std::int64_t>();
                cur.trajectory.index = j.at("trajectory").get<std::size_t>();
                cur.trajectory.reward = j.at("reward").get<double>();
                cur.trajectory.advantage = j.at("advantage").get<double>();
                cur.trajectory.loss_evict = j.at("loss_evict").get<Vector>();
                cur.loss_ori = j.at("loss_ori").get<Vector>();
                cur.entropy_ori = j.at("entropy_ori").get<Vector>();
                if (cur.trajectory.events.size() != j.at("events").get<std::size_t>()) {
                    throw Error(ErrorKind::format, name + ": footer event count mismatch");
                }
                out.push_back(std::move(cur));
                cur = TrajectoryRecord{};
            }
        }
    } catch (const json::exception& e) {
        throw Error(ErrorKind::format, name + ": " + e.what());
    }
    if (!cur.trajectory.events.empty()) {
        throw Error(ErrorKind::format, name + ": trajectory without footer");
    }
    return out;
}

}  // namespace fkv
