// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "fkv/error.hpp"
#include "fkv/model.hpp"
#include "fkv/numerics.hpp"

namespace fkv {

enum class Continuation { none, model };

/**
 * Motif-grammar corpus: fresh random motifs interleaved with verbatim recalls of earlier ones.
 * With Continuation::model only the first `prompt_length` tokens come from the grammar and the
 * rest is sampled from the frozen toy model, so sequences are the model's own traces.
 */
struct CorpusSpec {
    std::int64_t count = 32;
    std::int64_t length = 1024;
    std::int64_t vocab = 256;
    std::int64_t motif_library = 16;  // recalls draw from the most recent fresh motifs
    std::int64_t min_motif = 4;
    std::int64_t max_motif = 16;
    double recall_rate = 0.5;         // probability a segment is a recall
    std::uint64_t seed = 7;
    Continuation continuation = Continuation::model;
    std::int64_t prompt_length = 64;
    double temperature = 1.0;

    void validate(std::int64_t min_length = 2) const
    {
        require(count >= 1, "CorpusSpec: count must be >= 1");
        require(length >= min_length, "CorpusSpec: length " + std::to_string(length) +
                                          " too small (need >= " + std::to_string(min_length) + ")");
        require(vocab >= 2, "CorpusSpec: vocab must be >= 2");
        require(min_motif >= 1 && max_motif >= min_motif, "CorpusSpec: bad motif length range");
        require(motif_library >= 1, "CorpusSpec: motif_library must be >= 1");
        require(recall_rate >= 0.0 && recall_rate <= 1.0, "CorpusSpec: recall_rate must be in [0, 1]");
        require(prompt_length >= 1 && temperature > 0.0, "CorpusSpec: bad continuation settings");
    }

    friend bool operator==(const CorpusSpec&, const CorpusSpec&) = default;
};

struct Sequence {
    std::int64_t id = 0;
    std::vector<std::int64_t> tokens;
    std::vector<std::uint8_t> recalled;  // 1 where the token is part of a recalled motif

    friend bool operator==(const Sequence&, const Sequence&) = default;
};

inline Sequence generate_sequence(const CorpusSpec& spec, std::int64_t id)
{
    RandomStream rng(spec.seed, stream_key({0x636f72707573ULL, static_cast<std::uint64_t>(id)}));
    Sequence s;
    s.id = id;
    std::vector<std::vector<std::int64_t>> library;
    const auto span = static_cast<std::uint64_t>(spec.max_motif - spec.min_motif + 1);
    while (static_cast<std::int64_t>(s.tokens.size()) < spec.length) {
        const bool recall = !library.empty() && rng.uniform() < spec.recall_rate;
        std::vector<std::int64_t> motif;
        if (recall) {
            motif = library[rng.below(library.size())];
        } else {
            const auto len = spec.min_motif + static_cast<std::int64_t>(rng.below(span));
            for (std::int64_t i = 0; i < len; ++i) {
                motif.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(spec.vocab))));
            }
            library.push_back(motif);
            if (static_cast<std::int64_t>(library.size()) > spec.motif_library) {
                library.erase(library.begin());
            }
        }
        for (auto tok : motif) {
            if (static_cast<std::int64_t>(s.tokens.size()) == spec.length) {
                break;
            }
            s.tokens.push_back(tok);
            s.recalled.push_back(recall ? 1 : 0);
        }
    }
    return s;
}

/// Replaces tokens after the prompt with temperature samples from the model (teacher-free decode).
inline void continue_with_model(const ModelParams& p, Sequence& s, std::int64_t prompt_length, double temperature,
                                std::uint64_t seed)
{
    RandomStream rng(seed, stream_key({0x636f6e74ULL, static_cast<std::uint64_t>(s.id)}));
    DecodeState state(p.config, 32);
    const auto T = static_cast<std::int64_t>(s.tokens.size());
    for (std::int64_t t = 0; t + 1 < T; ++t) {
        StepOutput so = forward_step_with_cache(p, state, s.tokens[static_cast<std::size_t>(t)], t);
        if (t + 1 < prompt_length) {
            continue;
        }
        for (double& v : so.logits) {
            v /= temperature;
        }
        const Vector probs = stable_softmax(so.logits);
        s.tokens[static_cast<std::size_t>(t + 1)] = static_cast<std::int64_t>(draw_categorical(probs, rng.uniform()));
        s.recalled[static_cast<std::size_t>(t + 1)] = 0;
    }
}

/// Builds the corpus; `model` is required when the spec asks for model continuations.
inline std::vector<Sequence> gen_corpus(const CorpusSpec& spec, const ModelParams* model = nullptr,
                                        std::int64_t min_length = 2)
{
    spec.validate(min_length);
    if (spec.continuation == Continuation::model) {
        require(model != nullptr, "gen_corpus: model continuation requested without a model");
        require(model->config.vocab_size == spec.vocab, "gen_corpus: corpus vocab differs from the model's");
    }
    std::vector<Sequence> out;
    out.reserve(static_cast<std::size_t>(spec.count));
    for (std::int64_t i = 0; i < spec.count; ++i) {
        Sequence s = generate_sequence(spec, i);
        if (spec.continuation == Continuation::model) {
            continue_with_model(*model, s, spec.prompt_length, spec.temperature, spec.seed);
        }
        out.push_back(std::move(s));
    }
    return out;
}

/// Fraction of tokens that belong to recalled motifs.
inline double recall_fraction(const std::vector<Sequence>& corpus)
{
    std::size_t n = 0;
    std::size_t r = 0;
    for (const auto& s : corpus) {
        n += s.recalled.size();
        r += static_cast<std::size_t>(std::count(s.recalled.begin(), s.recalled.end(), std::uint8_t{1}));
    }
    return n == 0 ? 0.0 : static_cast<double>(r) / static_cast<double>(n);
}

}  // namespace fkv
