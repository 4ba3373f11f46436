// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "fkv/config.hpp"
#include "fkv/corpus.hpp"
#include "fkv/error.hpp"
#include "fkv/evalbench.hpp"
#include "fkv/golden.hpp"
#include "fkv/grpo.hpp"
#include "fkv/io.hpp"
#include "fkv/model.hpp"
#include "fkv/parallel.hpp"
#include "fkv/scorer.hpp"
#include "fkv/sft.hpp"

namespace fkv {

/// Artifact file names inside a run directory.
namespace artifact {
inline const char* model = "model.fkvm";
inline const char* corpus = "corpus.jsonl";
inline const char* rl_corpus = "rl_corpus.jsonl";
inline const char* heldout_corpus = "heldout_corpus.jsonl";
inline const char* labels = "labels.fkvl";
inline const char* golden_trace = "golden_trace.jsonl";
inline const char* scorer_sft = "scorer_sft.fkvs";
inline const char* sft_log = "sft_log.csv";
inline const char* sft_summary = "sft_summary.json";
inline const char* scorer_rl = "scorer_rl.fkvs";
inline const char* rl_log = "rl_log.csv";
inline const char* trajectories = "trajectories.jsonl";
inline const char* report = "report.csv";
inline const char* report_text = "report.txt";
inline const char* report_sequences = "report_sequences.csv";
inline const char* capacity = "capacity.csv";
}  // namespace artifact

/// Stamp document: {"format": "fkv-config", "version": 1, "stage": ..., "config": {...}}.
inline json config_stamp(const RunConfig& c, const std::string& stage)
{
    return {{"format", "fkv-config"}, {"version", 1}, {"stage", stage}, {"config", config_to_json(c)}};
}

/// Accepts a bare config document or a stage stamp.
inline RunConfig load_config(const json& j, std::optional<std::uint64_t> seed_override = std::nullopt)
{
    if (j.is_object() && j.contains("format")) {
        require(j.at("format") == "fkv-config", "config: unknown document format");
        require(j.value("version", 0) == 1, "config: unsupported stamp version");
        return config_from_json(j.at("config"), seed_override);
    }
    return config_from_json(j, seed_override);
}

inline RunConfig load_config_file(const fs::path& path, std::optional<std::uint64_t> seed_override = std::nullopt)
{
    std::ifstream in(path);
    require(static_cast<bool>(in), "cannot read config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::invalid_argument, path.string() + ": " + e.what());
    }
    return load_config(j, seed_override);
}

/// One run directory plus its resolved config. Stages read and write only inside `dir`.
class Pipeline {
public:
    Pipeline(RunConfig cfg, fs::path dir, std::size_t threads = 1)
        : cfg_(std::move(cfg)), dir_(std::move(dir)), threads_(threads)
    {
        validate_config(cfg_);
    }

    const RunConfig& config() const { return cfg_; }
    const fs::path& dir() const { return dir_; }
    fs::path path(const std::string& name) const { return dir_ / name; }

    void gen_data() const
    {
        const ModelParams model = init_params(cfg_.model, cfg_.model_seed);
        put(artifact::model, encode_model(model));
        put(artifact::corpus, encode_corpus(gen_corpus(cfg_.corpus, &model), detail::to_json(cfg_.corpus)));
        put(artifact::rl_corpus, encode_corpus(gen_corpus(cfg_.rl_corpus, &model), detail::to_json(cfg_.rl_corpus)));
        put(artifact::heldout_corpus,
            encode_corpus(gen_corpus(cfg_.heldout_corpus, &model), detail::to_json(cfg_.heldout_corpus)));
        stamp("gen-data");
    }

    void golden_labels() const
    {
        const ModelParams model = load_model();
        const auto corpus = load_corpus(artifact::corpus);
        const auto& s = cfg_.schedule;
        std::vector<LabeledSequence> out(corpus.size());
        parallel_for(corpus.size(), threads_, [&](std::size_t i) {
            require(static_cast<std::int64_t>(corpus[i].tokens.size()) > s.trigger_size(),
                    "golden-labels: sequence " + std::to_string(corpus[i].id) + " is not longer than B + L");
            out[i] = label_sequence(model, corpus[i].tokens, corpus[i].id, s, cfg_.features);
        });
        LabelSet labels{s, static_cast<std::size_t>(cfg_.model.layers), static_cast<std::size_t>(cfg_.model.kv_heads),
                        input_dim(), {}};
        std::string trace = jsonl_header("fkv-golden-trace", 1).dump() + "\n";
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            for (const auto& ev : out[i].stream.events) {
                trace += golden_trace_line(corpus[i].id, ev);
            }
            for (auto& st : out[i].states) {
                labels.states.push_back(std::move(st));
            }
            out[i] = LabeledSequence{};
        }
        put(artifact::golden_trace, trace);
        put(artifact::labels, encode_labels(labels));
        stamp("golden-labels");
    }

    void train_sft() const
    {
        const LabelSet labels = decode_labels(read_file(path(artifact::labels), "golden-labels"), artifact::labels);
        require(labels.schedule.budget == cfg_.schedule.budget &&
                    labels.schedule.eviction_length == cfg_.schedule.eviction_length &&
                    labels.layers == static_cast<std::size_t>(cfg_.model.layers) &&
                    labels.groups == static_cast<std::size_t>(cfg_.model.kv_heads) && labels.feature_dim == input_dim(),
                std::string(artifact::labels) + " does not match the config; rerun golden-labels", ErrorKind::invariant);
        const ScorerSet init = init_scorer_set(labels.layers, labels.groups, labels.feature_dim, cfg_.scorer_hidden,
                                               cfg_.scorer_seed);
        const SftResult res = fkv::train_sft(labels, init, cfg_.sft, threads_);
        std::string log = csv_version_line("sft-log", 1) + "step,lr,loss,heldout_accuracy\n";
        for (const auto& r : res.log) {
            log += std::to_string(r.step) + "," + fmt_double(r.lr) + "," + fmt_double(r.loss) + "," +
                   fmt_double(r.heldout_accuracy) + "\n";
        }
        const json summary{{"format", "fkv-sft-summary"},
                           {"version", 1},
                           {"heldout_sequences", res.heldout},
                           {"final_heldout_accuracy", fmt_double(res.final_heldout_accuracy)}};
        put(artifact::scorer_sft, encode_scorers(res.scorers));
        put(artifact::sft_log, log);
        put(artifact::sft_summary, summary.dump(2) + "\n");
        stamp("train-sft");
    }

    void train_rl() const
    {
        const ModelParams model = load_model();
        const auto dataset = load_corpus(artifact::rl_corpus);
        const ScorerSet init = load_scorers(artifact::scorer_sft, "train-sft");
        const RlResult res = fkv::train_rl(dataset, model, init, cfg_.schedule, cfg_.rl, cfg_.features, threads_);
        std::string log = csv_version_line("rl-log", 1) + "step,mean_reward,mean_abs_advantage,kl,clip_fraction\n";
        for (const auto& r : res.log) {
            log += std::to_string(r.step) + "," + fmt_double(r.mean_reward) + "," + fmt_double(r.mean_abs_advantage) +
                   "," + fmt_double(r.kl) + "," + fmt_double(r.clip_fraction) + "\n";
        }
        std::vector<TrajectoryRecord> recs;
        for (const auto& t : res.last_trajectories) {
            const Sequence* sq = nullptr;
            for (const auto& d : dataset) {
                sq = d.id == t.sequence ? &d : sq;
            }
            require(sq != nullptr, "train-rl: trajectory of unknown sequence", ErrorKind::invariant);
            const ReferencePass ref = reference_pass(model, sq->tokens);
            recs.push_back({t, ref.loss, ref.entropy});
        }
        put(artifact::scorer_rl, encode_scorers(res.scorers));
        put(artifact::rl_log, log);
        put(artifact::trajectories, encode_trajectories(recs, cfg_.trajectory_features));
        stamp("train-rl");
    }

    /// Scores full, golden, the three baselines and both learned checkpoints.
    std::vector<PolicyReport> eval() const
    {
        const ModelParams model = load_model();
        const auto corpus =
            load_corpus(cfg_.eval.corpus == "heldout" ? artifact::heldout_corpus : artifact::corpus);
        const ScorerSet sft = load_scorers(artifact::scorer_sft, "train-sft");
        const ScorerSet rl = load_scorers(artifact::scorer_rl, "train-rl");
        using K = PolicySpec::Kind;
        LearnedPolicyOptions lo;
        lo.mode = cfg_.eval.learned_mode;
        lo.candidate_multiplier = cfg_.rl.candidate_multiplier;
        lo.features = cfg_.features;
        auto spec = [&](std::string name, K kind, const ScorerSet* scorers = nullptr) {
            PolicySpec ps;
            ps.name = std::move(name);
            ps.kind = kind;
            ps.scorers = scorers;
            ps.learned = lo;
            ps.window = cfg_.eval.snapkv_window;
            ps.rkv_weight = cfg_.eval.rkv_weight;
            return ps;
        };
        const std::vector<PolicySpec> specs = {spec("full", K::full),           spec("golden", K::golden),
                                               spec("h2o", K::h2o),             spec("snapkv", K::snapkv),
                                               spec("rkv", K::rkv),             spec("sft", K::learned, &sft),
                                               spec("sft_rl", K::learned, &rl)};
        EvalOptions eo;
        eo.seed = cfg_.eval.seed;
        eo.attention_similarity = cfg_.eval.attention_similarity;
        eo.similarity_stride = cfg_.eval.similarity_stride;
        eo.accumulator_decay = cfg_.features.decay;
        auto reports = evaluate_suite(model, corpus, specs, cfg_.schedule, eo, threads_);
        const auto cap = capacity_table(cfg_.model, {cfg_.schedule}, cfg_.eval.capacity_seq_lens,
                                        cfg_.eval.capacity_mem_bytes);
        put(artifact::report, report_csv(reports, cfg_.eval.seed));
        put(artifact::report_text, fkv::report_text(reports));
        put(artifact::report_sequences, per_sequence_csv(reports));
        put(artifact::capacity, capacity_csv(cap));
        stamp("eval");
        return reports;
    }

    /**
     * Writes the full-pass attention of one corpus sequence as T x T CSVs into attn/, one file
     * per (layer, head). Empty `layer` or `head` selects all. Returns the files written.
     */
    std::vector<fs::path> dump_attn(std::size_t sequence_index, std::optional<std::size_t> layer,
                                    std::optional<std::size_t> head) const
    {
        const ModelParams model = load_model();
        const auto corpus = load_corpus(artifact::corpus);
        require(sequence_index < corpus.size(), "dump-attn: sequence index out of range");
        const auto L = static_cast<std::size_t>(cfg_.model.layers);
        const auto H = static_cast<std::size_t>(cfg_.model.q_heads);
        require(!layer || *layer < L, "dump-attn: layer out of range");
        require(!head || *head < H, "dump-attn: head out of range");
        const Sequence& seq = corpus[sequence_index];
        const ForwardOutput f = forward_full(model, seq.tokens, true);
        std::vector<fs::path> files;
        for (std::size_t l = 0; l < L; ++l) {
            for (std::size_t h = 0; h < H; ++h) {
                if ((layer && *layer != l) || (head && *head != h)) {
                    continue;
                }
                const PackedAttention& a = f.attn(l, h, H);
                std::string out;
                for (std::size_t i = 0; i < a.size(); ++i) {
                    for (std::size_t j = 0; j < a.size(); ++j) {
                        out += (j ? "," : "") + fmt_double(a.at(i, j), 8);
                    }
                    out += "\n";
                }
                const std::string name = "attn/seq" + std::to_string(seq.id) + "_layer" + std::to_string(l) +
                                         "_head" + std::to_string(h) + ".csv";
                put(name, out);
                files.push_back(path(name));
            }
        }
        stamp("dump-attn");
        return files;
    }

private:
    std::size_t input_dim() const
    {
        return feature_dim(static_cast<std::size_t>(cfg_.model.head_dim),
                           static_cast<std::size_t>(cfg_.model.group_size()));
    }

    void put(const std::string& name, const std::string& bytes) const { write_atomic(path(name), bytes); }

    void stamp(const std::string& stage) const { put(stage + ".config.json", config_stamp(cfg_, stage).dump(2) + "\n"); }

    ModelParams load_model() const
    {
        ModelParams p = decode_model(read_file(path(artifact::model), "gen-data"), artifact::model);
        require(p.config == cfg_.model, std::string(artifact::model) + " was built from a different model config",
                ErrorKind::invariant);
        return p;
    }

    std::vector<Sequence> load_corpus(const char* name) const
    {
        auto c = decode_corpus(read_file(path(name), "gen-data"), name);
        for (const auto& s : c) {
            for (auto t : s.tokens) {
                require(t >= 0 && t < cfg_.model.vocab_size, std::string(name) + ": token out of vocabulary",
                        ErrorKind::format);
            }
        }
        return c;
    }

    ScorerSet load_scorers(const char* name, const std::string& stage) const
    {
        ScorerSet s = decode_scorers(read_file(path(name), stage), name);
        bool ok = s.layers == static_cast<std::size_t>(cfg_.model.layers) &&
                  s.groups == static_cast<std::size_t>(cfg_.model.kv_heads);
        for (const auto& p : s.scorers) {
            ok = ok && p.input_dim == input_dim();
        }
        require(ok, std::string(name) + " does not match the model shape", ErrorKind::invariant);
        return s;
    }

    RunConfig cfg_;
    fs::path dir_;
    std::size_t threads_;
};

/// Per-cell deltas of two report CSVs plus the ordering verdict.
inline std::string compare_report_files(const fs::path& a, const fs::path& b)
{
    const ParsedReport ra = parse_report_csv(read_file(a, "eval"), a.string());
    const ParsedReport rb = parse_report_csv(read_file(b, "eval"), b.string());
    return compare_reports(ra, rb);
}

}  // namespace fkv
