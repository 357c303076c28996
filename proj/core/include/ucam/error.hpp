#pragma once

#include <stdexcept>
#include <string>

namespace ucam {

// Base of every error thrown by the library. The concrete subclass tells the
// caller which contract was broken; the CLI maps them onto exit codes.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Tensor extents disagree with what an operation requires.
class ShapeError : public Error {
  public:
    using Error::Error;
};

// A configuration value is out of its documented range.
class ConfigError : public Error {
  public:
    using Error::Error;
};

// API misuse: wrong call order, non-scalar loss, repeated backward, ...
class ContractError : public Error {
  public:
    using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
  public:
    using Error::Error;
};

// Training loss became non-finite.
class DivergenceError : public NumericError {
  public:
    using NumericError::NumericError;
};

// Well-formed input carrying invalid content (e.g. an out-of-range label).
class DataError : public Error {
  public:
    using Error::Error;
};

// Parameter set does not match the structure implied by a model config.
class StructureError : public Error {
  public:
    using Error::Error;
};

// Filesystem failures (cannot open, cannot write).
class IoError : public Error {
  public:
    using Error::Error;
};

// Binary file format violations. Each kind is a distinct type so callers can
// tell a stale file from a damaged one.
class FormatError : public IoError {
  public:
    using IoError::IoError;
};

class BadMagicError : public FormatError {
  public:
    using FormatError::FormatError;
};

class VersionMismatchError : public FormatError {
  public:
    using FormatError::FormatError;
};

class TruncatedFileError : public FormatError {
  public:
    using FormatError::FormatError;
};

class PayloadError : public FormatError {
  public:
    using FormatError::FormatError;
};

}  // namespace ucam
