#pragma once

#include <stdexcept>
#include <string>

namespace imloss {

/// Raised for malformed inputs: bad shapes, out-of-range labels, invalid
/// hyperparameters, schema violations. The CLI maps it to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace imloss
