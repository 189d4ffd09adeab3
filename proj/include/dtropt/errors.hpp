#pragma once

#include <stdexcept>
#include <string>

namespace dtropt {

/// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed input data (CSV structure, invariant violations).
struct DataError : Error {
    using Error::Error;
};

/// Rule/formula parse failures; carries the offset of the offending token.
struct ParseError : Error {
    ParseError(const std::string& msg, std::size_t offset)
        : Error(msg + " (at offset " + std::to_string(offset) + ")"), offset(offset) {}
    std::size_t offset;
};

/// Unbound identifiers, division by zero during rule evaluation.
struct EvalError : Error {
    using Error::Error;
};

/// Regression failures: rank deficiency, separation, non-convergence.
struct FitError : Error {
    using Error::Error;
};

/// No adherent patients at some (psi, stage): the positivity condition fails empirically.
struct PositivityError : Error {
    using Error::Error;
};

/// Covariance factorization failed even after jitter escalation.
struct ConditioningError : Error {
    using Error::Error;
};

/// Invalid analysis configuration (missing/forbidden options for a given mode).
struct ConfigError : Error {
    using Error::Error;
};

/// File I/O failures.
struct IoError : Error {
    using Error::Error;
};

}  // namespace dtropt
