#pragma once

#include <stdexcept>
#include <string>

namespace dyadflow {

// Shapes that do not conform for an operation.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced, fully masked attention rows, singular systems.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration values (odd head dim, even smoothing window, ...).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Caller broke an operation precondition.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Container magic/version mismatch.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Container payload truncated or inconsistent with its header.
struct CorruptionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace dyadflow
