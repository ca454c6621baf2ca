#pragma once

#include <stdexcept>
#include <string>

namespace rapo {

// Caller passed something that violates an operation's precondition.
class InputError : public std::invalid_argument {
 public:
  explicit InputError(const std::string& what) : std::invalid_argument(what) {}
};

// Operation invoked on an object that is not in the required state.
class StateError : public std::logic_error {
 public:
  explicit StateError(const std::string& what) : std::logic_error(what) {}
};

// Invalid or unsupported configuration (also covers I/O of config-bound files).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace rapo
