// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>

namespace gemma {

// Builds a message from any streamable pieces. Errors carry full context
// (shapes, names, offsets) so callers never need a debugger to know what broke.
template <typename... Args>
std::string str_cat(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

// Shape or dimension disagreement between tensors.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// A scalar argument outside its valid range (e.g. cap <= 0).
struct InvalidParamError : std::invalid_argument {
    explicit InvalidParamError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Token id or index outside the valid range.
struct IndexError : std::out_of_range {
    explicit IndexError(const std::string& msg) : std::out_of_range(msg) {}
};

// A caller violated an API contract (non-scalar backward, vocab mismatch, ...).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Model configuration violates an invariant.
struct ConfigError : std::invalid_argument {
    explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Sequence longer than the model's context span.
struct ContextOverflowError : std::runtime_error {
    explicit ContextOverflowError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed token stream or transcript; carries the first offending position.
struct ParseError : std::runtime_error {
    size_t position;
    ParseError(const std::string& msg, size_t pos)
        : std::runtime_error(str_cat(msg, " (at position ", pos, ")")), position(pos) {}
};

// Filesystem / serialization failure; message includes the path.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace gemma
