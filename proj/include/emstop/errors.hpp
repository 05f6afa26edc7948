#pragma once

#include <stdexcept>
#include <string>

namespace emstop {

// Bad arguments, inconsistent dimensions, malformed files or configs.
// The CLI maps these to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Numerical breakdown while iterating: singular prediction, non-finite
// iterate. The CLI maps these to exit code 2.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace emstop
