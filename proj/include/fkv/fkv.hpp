// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "fkv/config.hpp"
#include "fkv/corpus.hpp"
#include "fkv/error.hpp"
#include "fkv/evalbench.hpp"
#include "fkv/golden.hpp"
#include "fkv/grpo.hpp"
#include "fkv/io.hpp"
#include "fkv/kv_cache.hpp"
#include "fkv/model.hpp"
#include "fkv/model_config.hpp"
#include "fkv/numerics.hpp"
#include "fkv/parallel.hpp"
#include "fkv/pipeline.hpp"
#include "fkv/policies.hpp"
#include "fkv/scorer.hpp"
#include "fkv/sft.hpp"
#include "fkv/stream.hpp"
