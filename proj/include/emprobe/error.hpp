#pragma once

#include <stdexcept>
#include <string>

namespace emprobe {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed user-supplied configuration or flags.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A record (or an input to a computation) violates its invariants.
class InvariantError : public Error {
 public:
  using Error::Error;
};

/// I/O or format failure inside the tensor store.
class StoreError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace emprobe
