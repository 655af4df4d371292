#pragma once

#include <stdexcept>
#include <string>

namespace asyncppo {

// Invalid user-supplied configuration (unknown enum, bad range, ...).
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// A module invariant was found broken. The message names the invariant.
class InvariantViolation : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

// Non-finite numbers reached the optimizer.
class TrainingAborted : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// A rollout could not obtain parameters; the request must be requeued.
class ParamsUnavailable : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace asyncppo
