#pragma once

#include <stdexcept>
#include <string>

namespace melt {

/// Bad input data or files: malformed rows, unknown ids, wrong dimensions.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit together.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Training produced a non-finite value.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public InputError {
 public:
  using InputError::InputError;
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointManifestError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace melt
