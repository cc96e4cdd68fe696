#pragma once

#include <stdexcept>
#include <string>

namespace cadlab {

/// Bad input: malformed files, invariant violations, invalid configs.
/// The CLI maps this to exit code 1; anything else is a runtime failure.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cadlab
