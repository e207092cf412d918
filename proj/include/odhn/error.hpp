#pragma once

#include <stdexcept>
#include <string>

namespace odhn {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes do not fit the operation.
struct ShapeError : Error {
    using Error::Error;
};

// Value outside the mathematical domain of an operation.
struct DomainError : Error {
    using Error::Error;
};

// Malformed input file or token.
struct ParseError : Error {
    using Error::Error;
};

// Cross-record consistency violated (duplicate ids, length mismatch, ...).
struct IntegrityError : Error {
    using Error::Error;
};

// Invalid configuration value.
struct ConfigError : Error {
    using Error::Error;
};

// Optimization blew up (NaN loss/gradient) or cannot proceed.
struct TrainingError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Checkpoint does not match the model it is being loaded into.
struct VersionError : Error {
    using Error::Error;
};

}  // namespace odhn
