// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ted {

/// Tensor shapes disagree.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A scalar argument is outside its domain (temperature <= 0, bad layer index, ...).
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Input data violates a documented precondition (non-stochastic rows, bad token id).
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

/// A call-order or state contract was broken (non-scalar backward root, detached head, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// A frozen parameter was about to be trained or carried a gradient.
struct FreezeError : ContractError {
  using ContractError::ContractError;
};

struct UnsupportedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Configuration is invalid. `line` is 1-based, 0 when not tied to a source line.
struct ConfigError : std::runtime_error {
  ConfigError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line(line) {}
  std::size_t line;
};

/// A required artifact is missing, corrupt or dimension-incompatible.
struct ArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Runs handed to the comparison harness do not describe the same task.
struct MismatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ted
