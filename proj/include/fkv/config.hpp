// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fkv/corpus.hpp"
#include "fkv/error.hpp"
#include "fkv/evalbench.hpp"
#include "fkv/grpo.hpp"
#include "fkv/kv_cache.hpp"
#include "fkv/model_config.hpp"
#include "fkv/numerics.hpp"
#include "fkv/scorer.hpp"
#include "fkv/sft.hpp"

namespace fkv {

struct EvalSettings {
    std::uint64_t seed = 0;
    std::string corpus = "corpus";  // "corpus" or "heldout"
    bool attention_similarity = true;
    std::int64_t similarity_stride = 4;
    SamplingMode learned_mode = SamplingMode::sample;
    std::size_t snapkv_window = 8;
    double rkv_weight = 0.1;
    std::vector<std::int64_t> capacity_seq_lens = {1024, 2048, 4096, 8192};
    double capacity_mem_bytes = 8.0 * 1024 * 1024 * 1024;

    friend bool operator==(const EvalSettings&, const EvalSettings&) = default;
};

inline CorpusSpec sized_corpus(std::int64_t count, std::int64_t length)
{
    CorpusSpec s;
    s.count = count;
    s.length = length;
    return s;
}

/// Everything a pipeline stage needs; the resolved form is stamped next to every artifact.
struct RunConfig {
    std::uint64_t seed = 7;  // master seed; unset sub-seeds derive from it
    ModelConfig model;
    std::uint64_t model_seed = 0;
    EvictionSchedule schedule;
    FeatureOptions features;
    std::size_t scorer_hidden = 16;
    std::uint64_t scorer_seed = 0;
    CorpusSpec corpus;
    CorpusSpec rl_corpus = sized_corpus(20, 512);
    CorpusSpec heldout_corpus = sized_corpus(16, 512);
    SftConfig sft;
    RlConfig rl;
    EvalSettings eval;
    std::string output_dir = "runs/default";
    bool trajectory_features = false;

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag) { return splitmix64(master ^ splitmix64(tag)) >> 11; }

/// Assigns every sub-seed from the master seed.
inline void derive_all_seeds(RunConfig& c)
{
    c.model_seed = derive_seed(c.seed, 1);
    c.scorer_seed = derive_seed(c.seed, 2);
    c.corpus.seed = derive_seed(c.seed, 3);
    c.rl_corpus.seed = derive_seed(c.seed, 4);
    c.heldout_corpus.seed = derive_seed(c.seed, 5);
    c.sft.seed = derive_seed(c.seed, 6);
    c.rl.seed = derive_seed(c.seed, 7);
    c.eval.seed = derive_seed(c.seed, 8);
}

namespace detail {

template <typename E>
struct EnumNames;

template <>
struct EnumNames<SamplingMode> {
    static constexpr std::pair<SamplingMode, const char*> v[] = {{SamplingMode::sample, "sample"},
                                                                {SamplingMode::greedy, "greedy"}};
};
template <>
struct EnumNames<AccumulatorMode> {
    static constexpr std::pair<AccumulatorMode, const char*> v[] = {{AccumulatorMode::per_head, "per_head"},
                                                                   {AccumulatorMode::group_mean, "group_mean"}};
};
template <>
struct EnumNames<FeatureMask> {
    static constexpr std::pair<FeatureMask, const char*> v[] = {{FeatureMask::attn_kv, "attn_kv"},
                                                               {FeatureMask::attn_only, "attn_only"}};
};
template <>
struct EnumNames<RewardVariant> {
    static constexpr std::pair<RewardVariant, const char*> v[] = {
        {RewardVariant::ours, "ours"}, {RewardVariant::ours_sum, "ours_sum"}, {RewardVariant::low_large, "low_large"},
        {RewardVariant::all, "all"},   {RewardVariant::low, "low"},           {RewardVariant::high, "high"}};
};
template <>
struct EnumNames<Optimizer> {
    static constexpr std::pair<Optimizer, const char*> v[] = {{Optimizer::sgd, "sgd"}, {Optimizer::adam, "adam"}};
};
template <>
struct EnumNames<Continuation> {
    static constexpr std::pair<Continuation, const char*> v[] = {{Continuation::none, "none"},
                                                                {Continuation::model, "model"}};
};

template <typename E>
std::string enum_name(E e)
{
    for (const auto& [k, n] : EnumNames<E>::v) {
        if (k == e) {
            return n;
        }
    }
    throw Error(ErrorKind::invariant, "enum_name: unknown value");
}

template <typename E>
E enum_parse(const nlohmann::json& j, const std::string& field)
{
    const std::string s = j.get<std::string>();
    for (const auto& [k, n] : EnumNames<E>::v) {
        if (s == n) {
            return k;
        }
    }
    throw Error(ErrorKind::invalid_argument, "config: unknown value '" + s + "' for " + field);
}

/// Reads `key` into `out` when present; unknown keys are rejected by check_keys.
template <typename T>
void get_opt(const nlohmann::json& j, const char* key, T& out)
{
    if (j.contains(key)) {
        out = j.at(key).get<T>();
    }
}

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where)
{
    require(j.is_object(), "config: " + where + " must be an object");
    for (const auto& [k, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) {
            ok = ok || k == a;
        }
        require(ok, "config: unknown key '" + k + "' in " + where);
    }
}

inline nlohmann::json to_json(const ModelConfig& c)
{
    return {{"vocab_size", c.vocab_size},     {"layers", c.layers},           {"q_heads", c.q_heads},
            {"kv_heads", c.kv_heads},         {"head_dim", c.head_dim},       {"hidden_dim", c.hidden_dim},
            {"ffn_dim", c.ffn_dim},           {"max_positions", c.max_positions}, {"dtype_bytes", c.dtype_bytes},
            {"qk_gain", c.qk_gain},           {"unembed_gain", c.unembed_gain},
            {"rope_base", c.rope_base}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c)
{
    check_keys(j, {"vocab_size", "layers", "q_heads", "kv_heads", "head_dim", "hidden_dim", "ffn_dim",
                   "max_positions", "dtype_bytes", "qk_gain", "unembed_gain", "rope_base"},
               "model");
    get_opt(j, "vocab_size", c.vocab_size);
    get_opt(j, "layers", c.layers);
    get_opt(j, "q_heads", c.q_heads);
    get_opt(j, "kv_heads", c.kv_heads);
    get_opt(j, "head_dim", c.head_dim);
    get_opt(j, "hidden_dim", c.hidden_dim);
    get_opt(j, "ffn_dim", c.ffn_dim);
    get_opt(j, "max_positions", c.max_positions);
    get_opt(j, "dtype_bytes", c.dtype_bytes);
    get_opt(j, "qk_gain", c.qk_gain);
    get_opt(j, "unembed_gain", c.unembed_gain);
    get_opt(j, "rope_base", c.rope_base);
}

inline nlohmann::json to_json(const CorpusSpec& s)
{
    return {{"count", s.count},
            {"length", s.length},
            {"vocab", s.vocab},
            {"motif_library", s.motif_library},
            {"min_motif", s.min_motif},
            {"max_motif", s.max_motif},
            {"recall_rate", s.recall_rate},
            {"seed", s.seed},
            {"continuation", enum_name(s.continuation)},
            {"prompt_length", s.prompt_length},
            {"temperature", s.temperature}};
}

inline void from_json(const nlohmann::json& j, CorpusSpec& s, const std::string& where)
{
    check_keys(j, {"count", "length", "vocab", "motif_library", "min_motif", "max_motif", "recall_rate", "seed",
                   "continuation", "prompt_length", "temperature"},
               where);
    get_opt(j, "count", s.count);
    get_opt(j, "length", s.length);
    get_opt(j, "vocab", s.vocab);
    get_opt(j, "motif_library", s.motif_library);
    get_opt(j, "min_motif", s.min_motif);
    get_opt(j, "max_motif", s.max_motif);
    get_opt(j, "recall_rate", s.recall_rate);
    get_opt(j, "seed", s.seed);
    if (j.contains("continuation")) {
        s.continuation = enum_parse<Continuation>(j.at("continuation"), where + ".continuation");
    }
    get_opt(j, "prompt_length", s.prompt_length);
    get_opt(j, "temperature", s.temperature);
}

inline nlohmann::json to_json(const SftConfig& c)
{
    return {{"margin", c.margin},
            {"batch_size", c.batch_size},
            {"steps", c.steps},
            {"learning_rate", c.learning_rate},
            {"warmup_steps", c.warmup_steps},
            {"momentum", c.momentum},
            {"pairs_per_state", c.pairs_per_state},
            {"heldout_fraction", c.heldout_fraction},
            {"log_every", c.log_every},
            {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SftConfig& c)
{
    check_keys(j, {"margin", "batch_size", "steps", "learning_rate", "warmup_steps", "momentum", "pairs_per_state",
                   "heldout_fraction", "log_every", "seed"},
               "sft");
    get_opt(j, "margin", c.margin);
    get_opt(j, "batch_size", c.batch_size);
    get_opt(j, "steps", c.steps);
    get_opt(j, "learning_rate", c.learning_rate);
    get_opt(j, "warmup_steps", c.warmup_steps);
    get_opt(j, "momentum", c.momentum);
    get_opt(j, "pairs_per_state", c.pairs_per_state);
    get_opt(j, "heldout_fraction", c.heldout_fraction);
    get_opt(j, "log_every", c.log_every);
    get_opt(j, "seed", c.seed);
}

inline nlohmann::json to_json(const RlConfig& c)
{
    return {{"group_size", c.group_size},
            {"clip", c.clip},
            {"kl_coef", c.kl_coef},
            {"margin", c.margin},
            {"low_entropy_fraction", c.low_entropy_fraction},
            {"learning_rate", c.learning_rate},
            {"warmup_steps", c.warmup_steps},
            {"steps", c.steps},
            {"sequences_per_step", c.sequences_per_step},
            {"minibatches", c.minibatches},
            {"reward", enum_name(c.reward)},
            {"optimizer", enum_name(c.optimizer)},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps},
            {"candidate_multiplier", c.candidate_multiplier},
            {"log_every", c.log_every},
            {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, RlConfig& c)
{
    check_keys(j, {"group_size", "clip", "kl_coef", "margin", "low_entropy_fraction", "learning_rate", "warmup_steps",
                   "steps", "sequences_per_step", "minibatches", "reward", "optimizer", "adam_beta1", "adam_beta2",
                   "adam_eps", "candidate_multiplier", "log_every", "seed"},
               "rl");
    get_opt(j, "group_size", c.group_size);
    get_opt(j, "clip", c.clip);
    get_opt(j, "kl_coef", c.kl_coef);
    get_opt(j, "margin", c.margin);
    get_opt(j, "low_entropy_fraction", c.low_entropy_fraction);
    get_opt(j, "learning_rate", c.learning_rate);
    get_opt(j, "warmup_steps", c.warmup_steps);
    get_opt(j, "steps", c.steps);
    get_opt(j, "sequences_per_step", c.sequences_per_step);
    get_opt(j, "minibatches", c.minibatches);
    if (j.contains("reward")) {
        c.reward = enum_parse<RewardVariant>(j.at("reward"), "rl.reward");
    }
    if (j.contains("optimizer")) {
        c.optimizer = enum_parse<Optimizer>(j.at("optimizer"), "rl.optimizer");
    }
    get_opt(j, "adam_beta1", c.adam_beta1);
    get_opt(j, "adam_beta2", c.adam_beta2);
    get_opt(j, "adam_eps", c.adam_eps);
    get_opt(j, "candidate_multiplier", c.candidate_multiplier);
    get_opt(j, "log_every", c.log_every);
    get_opt(j, "seed", c.seed);
}

}  // namespace detail

inline nlohmann::json config_to_json(const RunConfig& c)
{
    using detail::enum_name;
    using detail::to_json;
    return {{"seed", c.seed},
            {"model", to_json(c.model)},
            {"model_seed", c.model_seed},
            {"schedule", {{"budget", c.schedule.budget}, {"eviction_length", c.schedule.eviction_length}}},
            {"features",
             {{"accumulators", enum_name(c.features.accumulators)},
              {"mask", enum_name(c.features.mask)},
              {"decay", c.features.decay}}},
            {"scorer", {{"hidden", c.scorer_hidden}, {"seed", c.scorer_seed}}},
            {"corpus", to_json(c.corpus)},
            {"rl_corpus", to_json(c.rl_corpus)},
            {"heldout_corpus", to_json(c.heldout_corpus)},
            {"sft", to_json(c.sft)},
            {"rl", to_json(c.rl)},
            {"eval",
             {{"seed", c.eval.seed},
              {"corpus", c.eval.corpus},
              {"attention_similarity", c.eval.attention_similarity},
              {"similarity_stride", c.eval.similarity_stride},
              {"learned_mode", enum_name(c.eval.learned_mode)},
              {"snapkv_window", c.eval.snapkv_window},
              {"rkv_weight", c.eval.rkv_weight},
              {"capacity_seq_lens", c.eval.capacity_seq_lens},
              {"capacity_mem_bytes", c.eval.capacity_mem_bytes}}},
            {"output_dir", c.output_dir},
            {"trajectory_features", c.trajectory_features}};
}

inline void validate_config(const RunConfig& c)
{
    c.model.validate();
    c.schedule.validate();
    c.sft.validate();
    c.rl.validate();
    require(c.scorer_hidden >= 1, "config: scorer.hidden must be >= 1");
    require(c.eval.corpus == "corpus" || c.eval.corpus == "heldout", "config: eval.corpus must be corpus|heldout");
    for (const auto* cs : {&c.corpus, &c.rl_corpus, &c.heldout_corpus}) {
        cs->validate(c.schedule.trigger_size() + 1);
        require(cs->vocab == c.model.vocab_size, "config: corpus vocab must equal model.vocab_size");
        require(cs->length <= c.model.max_positions, "config: corpus length exceeds model.max_positions");
    }
}

/**
 * Parses a config document. Sub-seeds left out of the document derive from the master seed;
 * `seed_override` replaces the master and re-derives every sub-seed.
 */
inline RunConfig config_from_json(const nlohmann::json& j, std::optional<std::uint64_t> seed_override = std::nullopt)
{
    using detail::get_opt;
    RunConfig c;
    try {
        detail::check_keys(j, {"seed", "model", "model_seed", "schedule", "features", "scorer", "corpus", "rl_corpus",
                               "heldout_corpus", "sft", "rl", "eval", "output_dir", "trajectory_features"},
                           "config");
        get_opt(j, "seed", c.seed);
        derive_all_seeds(c);
        if (j.contains("model")) {
            detail::from_json(j.at("model"), c.model);
        }
        get_opt(j, "model_seed", c.model_seed);
        if (j.contains("schedule")) {
            detail::check_keys(j.at("schedule"), {"budget", "eviction_length"}, "schedule");
            get_opt(j.at("schedule"), "budget", c.schedule.budget);
            get_opt(j.at("schedule"), "eviction_length", c.schedule.eviction_length);
        }
        if (j.contains("features")) {
            const auto& f = j.at("features");
            detail::check_keys(f, {"accumulators", "mask", "decay"}, "features");
            if (f.contains("accumulators")) {
                c.features.accumulators = detail::enum_parse<AccumulatorMode>(f.at("accumulators"), "features.accumulators");
            }
            if (f.contains("mask")) {
                c.features.mask = detail::enum_parse<FeatureMask>(f.at("mask"), "features.mask");
            }
            get_opt(f, "decay", c.features.decay);
        }
        if (j.contains("scorer")) {
            detail::check_keys(j.at("scorer"), {"hidden", "seed"}, "scorer");
            get_opt(j.at("scorer"), "hidden", c.scorer_hidden);
            get_opt(j.at("scorer"), "seed", c.scorer_seed);
        }
        // Corpus vocab follows the model unless set explicitly.
        c.corpus.vocab = c.rl_corpus.vocab = c.heldout_corpus.vocab = c.model.vocab_size;
        if (j.contains("corpus")) {
            detail::from_json(j.at("corpus"), c.corpus, "corpus");
        }
        if (j.contains("rl_corpus")) {
            detail::from_json(j.at("rl_corpus"), c.rl_corpus, "rl_corpus");
        }
        if (j.contains("heldout_corpus")) {
            detail::from_json(j.at("heldout_corpus"), c.heldout_corpus, "heldout_corpus");
        }
        if (j.contains("sft")) {
            detail::from_json(j.at("sft"), c.sft);
        }
        if (j.contains("rl")) {
            detail::from_json(j.at("rl"), c.rl);
        }
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            detail::check_keys(e, {"seed", "corpus", "attention_similarity", "similarity_stride", "learned_mode",
                                   "snapkv_window", "rkv_weight", "capacity_seq_lens", "capacity_mem_bytes"},
                               "eval");
            get_opt(e, "seed", c.eval.seed);
            get_opt(e, "corpus", c.eval.corpus);
            get_opt(e, "attention_similarity", c.eval.attention_similarity);
            get_opt(e, "similarity_stride", c.eval.similarity_stride);
            if (e.contains("learned_mode")) {
                c.eval.learned_mode = detail::enum_parse<SamplingMode>(e.at("learned_mode"), "eval.learned_mode");
            }
            get_opt(e, "snapkv_window", c.eval.snapkv_window);
            get_opt(e, "rkv_weight", c.eval.rkv_weight);
            get_opt(e, "capacity_seq_lens", c.eval.capacity_seq_lens);
            get_opt(e, "capacity_mem_bytes", c.eval.capacity_mem_bytes);
        }
        get_opt(j, "output_dir", c.output_dir);
        get_opt(j, "trajectory_features", c.trajectory_features);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::invalid_argument, std::string("config: ") + e.what());
    }
    if (seed_override) {
        c.seed = *seed_override;
        derive_all_seeds(c);
    }
    validate_config(c);
    return c;
}

}  // namespace fkv
