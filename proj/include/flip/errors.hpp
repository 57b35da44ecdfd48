#pragma once

#include <stdexcept>
#include <string>

namespace flip {

/// Tensor or image dimensions do not fit the operation.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Input outside the mathematical domain of an operation (zero norm, single
/// class, degenerate variance, ...).
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File format or filesystem failure.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training diverged (non-finite loss or gradient); the message carries a
/// diagnostic dump of the failing step.
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace flip
