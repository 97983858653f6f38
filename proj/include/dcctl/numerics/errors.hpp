#pragma once

#include <stdexcept>
#include <string>

namespace dcctl {

/// Shapes or extents that do not agree.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A documented precondition of an operation was violated.
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value (odd rotary width, unknown key, ...).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Lookup of an unregistered id or name.
struct LookupError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Missing or inconsistent persisted state (checkpoints, datasets).
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed text input. Carries the offending line when known.
struct ParseError : std::runtime_error {
  ParseError(const std::string& what, int line = 0)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

/// NaN or Inf produced by an operation on finite input.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace dcctl
