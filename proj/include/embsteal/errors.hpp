#pragma once

#include <stdexcept>
#include <string>

namespace embsteal {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent tensor extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced, or a degenerate input such as a zero vector.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data (files, records, caches).
class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace embsteal
