#pragma once

#include <stdexcept>
#include <string>

namespace fedqif {

// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed configuration, inconsistent inputs, missing files or payloads.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Array shapes that do not agree with each other.
class DimensionError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Singular systems, non-finite values and other failures of the numerics.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// A logit mean collapsed onto 0 or 1.
class DegenerateFitError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

// Payload bytes that fail the checksum or carry an unknown version.
class FormatError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace fedqif
