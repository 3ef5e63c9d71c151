#pragma once

#include <stdexcept>
#include <string>

namespace soundprobe {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data violates a format or content invariant (bad manifest, NaN entries,
/// mismatched class sets). The CLI maps these to exit code 1.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A caller passed arguments outside an operation's precondition.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

}  // namespace soundprobe
