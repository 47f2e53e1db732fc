#pragma once

#include <stdexcept>
#include <string>

namespace volformer {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent tensor extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values (model, training, preprocessing, CLI flags).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. calling backward() on a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed or missing input data.
class DataError : public Error {
 public:
  using Error::Error;
};

class ParseError : public DataError {
 public:
  using DataError::DataError;
};

// Checkpoint tensors that do not match the model.
class LoadError : public DataError {
 public:
  using DataError::DataError;
};

// Non-finite loss or gradient during optimization.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace volformer
