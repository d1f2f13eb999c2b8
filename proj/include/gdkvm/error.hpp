#pragma once

#include <stdexcept>
#include <string>

namespace gdkvm {

// Operand shapes do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A quantity that must be non-zero (normalizer, key norm, variance) vanished.
class DegenerateError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A metric is not defined for the given input (e.g. distance to an empty mask).
class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Malformed file or config content.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gdkvm
