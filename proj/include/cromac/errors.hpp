#pragma once
#include <stdexcept>
#include <string>

namespace cromac {

// Error taxonomy used across the library:
//   ShapeError    - tensor/layer dimension mismatch
//   ContractError - precondition violation (empty list, bad index, ...)
//   DomainError   - value outside the mathematical domain (nonpositive variance, ...)
//   NumericError  - non-finite intermediate detected
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& msg) : std::runtime_error("domain error: " + msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

}  // namespace cromac
