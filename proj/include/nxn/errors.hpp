#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nxn {

// Input that violates a documented precondition (shape, range, finiteness).
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A run produced non-finite values where finite ones are required.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnsupportedTableau : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalSingularity : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require_size(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw InvalidInput(std::string(what) + ": expected length " + std::to_string(want) +
                       ", got " + std::to_string(got));
  }
}

}  // namespace nxn
