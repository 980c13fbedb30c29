#pragma once

#include <stdexcept>
#include <string>

namespace deepdemand {

/// Violated precondition or invalid argument. The CLI maps this to exit code 2.
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Tensor or feature width mismatch.
class ShapeError : public ContractError {
public:
    using ContractError::ContractError;
};

/// Malformed or inconsistent input data (bad rows, missing prices, ...).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values encountered while training.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A numerical procedure could not reach its target (bisection bracket, singular system, ...).
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace deepdemand
