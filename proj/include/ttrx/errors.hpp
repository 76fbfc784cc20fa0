#pragma once

#include <stdexcept>
#include <string>

namespace ttrx {

// Error categories. The CLI maps each to a distinct exit code.

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

// Invalid numeric parameter (dropout rate, threshold, ...).
struct ParameterError : Error {
    using Error::Error;
};

// Caller broke an API contract (non-scalar loss, ...).
struct ContractError : Error {
    using Error::Error;
};

// Operation requested on parameters in the wrong lifecycle state.
struct StateError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct FormatError : Error {
    using Error::Error;
};

struct FileError : Error {
    using Error::Error;
};

struct DivergenceError : Error {
    DivergenceError(const std::string& what, int epoch) : Error(what), epoch(epoch) {}
    int epoch;
};

struct GenerationError : Error {
    using Error::Error;
};

// Statistic undefined for the input (zero variance, empty reference).
struct DegenerateError : Error {
    using Error::Error;
};

struct UndefinedMetricError : DegenerateError {
    using DegenerateError::DegenerateError;
};

}  // namespace ttrx
