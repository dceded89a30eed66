#pragma once

#include <stdexcept>
#include <string>

namespace refseg {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes do not conform (names the offending axis when known).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters or model configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Bad user-supplied input (empty text, non-binary mask, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

/// File does not follow the expected layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Truncated or otherwise damaged data.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

/// A function evaluation produced a non-finite value.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

/// Synthetic data could not be generated under the requested constraints.
class GenerationError : public Error {
 public:
  using Error::Error;
};

class InternalError : public Error {
 public:
  using Error::Error;
};

}  // namespace refseg
