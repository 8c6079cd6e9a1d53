#pragma once

#include <stdexcept>
#include <string>

namespace mvr {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dimension / rank mismatches. Messages name the offending shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced by an operation; message names the op.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data (files, ids, vocab, configs).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Bad command-line usage or invalid argument values.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace mvr
