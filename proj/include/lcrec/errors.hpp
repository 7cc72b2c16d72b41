#pragma once

#include <stdexcept>
#include <string>

namespace lcrec {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Invalid scenario or run configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed or unusable input data (schema violations, empty risk sets, no events).
class DataError : public Error {
public:
    using Error::Error;
};

/// Numerical failure: non-convergence, divergence, singular systems.
class NumericError : public Error {
public:
    using Error::Error;
};

class ConvergenceError : public NumericError {
public:
    using NumericError::NumericError;
};

/// A coefficient ran off to infinity (monotone likelihood).
class DivergenceError : public NumericError {
public:
    using NumericError::NumericError;
};

class SingularityError : public NumericError {
public:
    using NumericError::NumericError;
};

/// Model cannot be fitted to the supplied response (e.g. all-zero counts).
class DegenerateFitError : public NumericError {
public:
    using NumericError::NumericError;
};

class PoolingError : public Error {
public:
    using Error::Error;
};

}  // namespace lcrec
