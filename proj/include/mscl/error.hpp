#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mscl {

// Tensor/operation dimension mismatch; message names both shapes.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Violated operation precondition.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Invalid or unknown configuration value.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed on-disk artifact; carries the byte offset where parsing failed.
struct FormatError : std::runtime_error {
  FormatError(const std::string& msg, std::uint64_t at)
      : std::runtime_error(msg + " (offset " + std::to_string(at) + ")"), offset(at) {}
  std::uint64_t offset;
};

// Missing or inconsistent pipeline stage artifact.
struct StageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training diverged; message carries diagnostics.
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mscl
