#pragma once

#include <stdexcept>
#include <string>

namespace cem {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or broadcast incompatibility.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Input outside the mathematical domain of an operation (empty history,
// fully masked softmax row, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Caller violated an API contract (non-scalar backward root, foreign tape).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class OracleError : public Error {
 public:
  using Error::Error;
};

}  // namespace cem
