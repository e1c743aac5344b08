#pragma once

#include <stdexcept>
#include <string>

namespace slr {

// Bad arguments, configuration files or flag combinations. CLI exit code 1.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Anything wrong with data on disk: bad magic, truncation, bad JSON shape. CLI exit code 2.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CorruptRecordError : public FormatError {
public:
    using FormatError::FormatError;
};

class ArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Numerically meaningless input: all-false mask, zero-norm embedding target.
class DegenerateInputError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class TrainingDivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidChromosomeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class SelectionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace slr
