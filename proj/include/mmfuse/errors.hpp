#pragma once

#include <stdexcept>
#include <string>

namespace mmfuse {

/// Invalid configuration (violated invariant, unknown stage, bad tap index).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes do not line up.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user data (out-of-range score, empty frame list, duplicate ids).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failure while loading or parsing an on-disk artifact.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mmfuse
