#pragma once

#include <stdexcept>
#include <string>

namespace voxfuse {

/// Shape or dimension mismatch between operands.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// Invalid numeric content (NaN input, violated normalization contract,
/// degenerate batch, label out of range).
struct ValueError : std::invalid_argument {
    explicit ValueError(const std::string& what) : std::invalid_argument(what) {}
};

/// Key not found in a loaded table (e.g. prompt missing from an embedding file).
struct LookupError : std::runtime_error {
    explicit LookupError(const std::string& what) : std::runtime_error(what) {}
};

/// Optimization produced non-finite state.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace voxfuse
