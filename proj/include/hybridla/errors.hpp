#pragma once

#include <stdexcept>
#include <string>

namespace hybridla {

// Shape disagreements between tensors (matmul inner dims, conv kernel vs map, ...).
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid scalar arguments: non-positive stride, eps <= 0, heads not dividing dim, ...
struct ParameterError : std::runtime_error {
    explicit ParameterError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse: backward on a non-scalar, decoding an empty query set, expanding after EOS.
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad caller-supplied data values: NaN costs, unknown class ids in predictions.
struct InputError : std::runtime_error {
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed config / annotation files. `path` carries JSON-path style context.
struct ParseError : std::runtime_error {
    ParseError(const std::string& path, const std::string& msg)
        : std::runtime_error(path + ": " + msg), path(path) {}
    std::string path;
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Synthetic page placement exhausted its retry budget.
struct GenerationError : std::runtime_error {
    explicit GenerationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint load failures, distinguished by category.
struct CheckpointError : std::runtime_error {
    enum class Kind { BadMagic, BadVersion, Truncated, Malformed };
    CheckpointError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind(kind) {}
    Kind kind;
};

}  // namespace hybridla
