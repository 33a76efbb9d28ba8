#pragma once

#include <stdexcept>
#include <string>

namespace nmpc_tune {

// Base of every error thrown by the library. The CLI maps subclasses to exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error { using Error::Error; };
struct NoConvergence : Error { using Error::Error; };
struct EmptySequence : Error { using Error::Error; };
struct EmptyReference : Error { using Error::Error; };
struct EmptyLog : Error { using Error::Error; };
struct SolverFailure : Error { using Error::Error; };
struct SolverStall : SolverFailure { using SolverFailure::SolverFailure; };
struct OutOfBounds : Error { using Error::Error; };
struct RolloutFailure : Error { using Error::Error; };
struct NonFinite : Error { using Error::Error; };
struct IllConditioned : Error { using Error::Error; };

}  // namespace nmpc_tune
