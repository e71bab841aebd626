#pragma once

#include <stdexcept>
#include <string>

namespace lexlm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or out-of-contract dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data: corpus files, model files, configs.
/// The CLI maps this family to exit status 2.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Bad arguments or invalid configuration values (CLI exit status 1).
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace lexlm
