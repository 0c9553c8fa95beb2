#pragma once

#include <stdexcept>
#include <string>

namespace certkit {

// Shape/broadcast violations. Messages include the offending shapes.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Domain violations of math ops (log of non-positive values, bad labels).
struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where the contract demands finiteness (bounds, losses).
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Misuse of the autodiff tape (root not recorded, mixed tapes).
struct TapeError : std::runtime_error {
  explicit TapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// File-format and filesystem failures.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Run-configuration parse/validation failures.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace certkit
