#pragma once

#include <stdexcept>
#include <string>

namespace intrafair {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A required column or config key is missing.
class SchemaError : public Error {
public:
    using Error::Error;
};

/// Input values violate a documented precondition (non-binary labels, bad fractions, ...).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Matrix/vector dimensions do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A rate was requested whose conditioning set is empty (e.g. TPR of a group without positives).
class UndefinedRateError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss, gradient or parameter.
class NumericError : public Error {
public:
    using Error::Error;
};

/// A split is empty, single-class or misses a protected group.
class SplitError : public Error {
public:
    using Error::Error;
};

/// Synthetic data could not be generated with the requested spec.
class GenerationError : public Error {
public:
    using Error::Error;
};

/// Checkpoint or data file could not be read.
class LoadError : public Error {
public:
    using Error::Error;
};

}  // namespace intrafair
