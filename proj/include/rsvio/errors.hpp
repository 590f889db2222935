#pragma once

#include <stdexcept>
#include <string>

namespace rsvio {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed, missing or inconsistent input data (files, calibration).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A geometric operation was evaluated outside its valid domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// The optimizer produced non-finite values or failed to make progress.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace rsvio
