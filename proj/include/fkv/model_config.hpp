// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>

#include "fkv/error.hpp"

namespace fkv {

/// Shape and initialization knobs of the toy decoder. Defaults are the desk-scale model.
struct ModelConfig {
    std::int64_t vocab_size = 256;
    std::int64_t layers = 4;
    std::int64_t q_heads = 8;
    std::int64_t kv_heads = 2;
    std::int64_t head_dim = 16;
    std::int64_t hidden_dim = 128;   // residual stream width
    std::int64_t ffn_dim = 256;      // MLP intermediate width
    std::int64_t max_positions = 2048;
    std::int64_t dtype_bytes = 2;    // only used by the capacity model
    double qk_gain = 2.0;            // init gain of the Q/K projections
    double unembed_gain = 2.0;       // init gain of the unembedding
    double rope_base = 10000.0;

    std::int64_t group_size() const { return q_heads / kv_heads; }

    void validate() const
    {
        require(vocab_size >= 1 && layers >= 1 && q_heads >= 1 && kv_heads >= 1 && head_dim >= 1 &&
                    hidden_dim >= 1 && ffn_dim >= 1 && max_positions >= 1 && dtype_bytes >= 1,
                "ModelConfig: all dimensions must be >= 1");
        require(q_heads % kv_heads == 0, "ModelConfig: q_heads must be divisible by kv_heads");
        require(head_dim % 2 == 0, "ModelConfig: head_dim must be even for rotary embeddings");
        require(qk_gain > 0.0 && unembed_gain > 0.0 && rope_base > 1.0, "ModelConfig: bad gains");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

}  // namespace fkv
