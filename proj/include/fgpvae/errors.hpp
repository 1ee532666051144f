#pragma once

#include <stdexcept>
#include <string>

namespace fgpvae {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical failures.
class CholeskyError : public Error {
  using Error::Error;
};
class NonFiniteError : public Error {
  using Error::Error;
};

// Contract violations on inputs.
class MixedDigitError : public Error {
  using Error::Error;
};
class ShapeError : public Error {
  using Error::Error;
};
class ConfigError : public Error {
  using Error::Error;
};

// Data and file-format failures.
class DataError : public Error {
  using Error::Error;
};
class BadMagicError : public DataError {
  using DataError::DataError;
};
class TruncatedFileError : public DataError {
  using DataError::DataError;
};
class CountMismatchError : public DataError {
  using DataError::DataError;
};
class VersionError : public DataError {
  using DataError::DataError;
};
class InsufficientDigitsError : public DataError {
  using DataError::DataError;
};
class MissingContextError : public DataError {
  using DataError::DataError;
};
class UnknownDigitError : public DataError {
  using DataError::DataError;
};

}  // namespace fgpvae
