#pragma once

#include <stdexcept>

namespace hierseg {

// Bad inputs or configuration: malformed files, cut/tree mismatches, shape
// errors. The CLI maps these to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A run that started from valid inputs failed mid-flight (non-finite loss,
// tolerance exceeded, I/O failure). CLI exit code 3.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hierseg
