#pragma once

#include <stdexcept>
#include <string>

namespace framefuse {

/// Base class for all framefuse errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed inputs: bad files, shape mismatches, violated preconditions.
/// Maps to CLI exit code 2.
struct InputError : Error {
  using Error::Error;
};

/// Numeric failures: degenerate configurations, divergence, non-finite values.
/// Maps to CLI exit code 3.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace framefuse
