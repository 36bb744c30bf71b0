#pragma once

#include <stdexcept>

namespace vitdec {

/// Bad arguments, malformed or missing artifacts. CLI exit code 2.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A numeric invariant failed (reconstruction identity, divergence,
/// non-finite values). CLI exit code 3.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace vitdec
