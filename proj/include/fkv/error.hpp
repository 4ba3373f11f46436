// Copyright (C) 2026 The ForesightKV-Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace fkv {

/// Failure categories. The CLI maps them onto its exit codes.
enum class ErrorKind {
    invalid_argument,  // bad input to an operation (precondition)
    invariant,         // a data-structure or numerical invariant broke
    missing_artifact,  // an upstream pipeline file is absent
    format,            // unreadable or unknown-version artifact
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline void require(bool ok, const std::string& what, ErrorKind kind = ErrorKind::invalid_argument)
{
    if (!ok) {
        throw Error(kind, what);
    }
}

}  // namespace fkv
