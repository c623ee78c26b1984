#pragma once

#include <stdexcept>
#include <string>

namespace cloudseg {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Caller-side mistakes: bad arguments, bad configs, invariant violations.
// The CLI maps these to exit code 1.
class ValidationError : public Error {
public:
    using Error::Error;
};

class ShapeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class RangeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

// Environment and data failures. The CLI maps these to exit code 2.
class IoError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class GenerationError : public Error {
public:
    using Error::Error;
};

} // namespace cloudseg
