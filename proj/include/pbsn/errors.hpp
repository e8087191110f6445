#pragma once

#include <stdexcept>
#include <string>

namespace pbsn {

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ParameterError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a primitive produces NaN/Inf or a loss diverges.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class TrainingError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class ReplacementError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class PruningError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CorruptCheckpoint : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class MetricError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

}  // namespace pbsn
