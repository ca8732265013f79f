#pragma once

#include <stdexcept>
#include <string>

namespace setdet {

// Every error raised by the library derives from Error so callers can catch
// a single type at tool boundaries.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInputError : public Error {
 public:
  explicit InvalidInputError(const std::string& what) : Error("invalid input: " + what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape error: " + what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what) {}
};

// Raised when an artifact is scored/consumed by a stage it was not produced for
// (layout checksum or run fingerprint mismatch).
class IncompatibleError : public Error {
 public:
  explicit IncompatibleError(const std::string& what) : Error("incompatible artifact: " + what) {}
};

class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& what) : Error("training error: " + what) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error("format error: " + what) {}
};

}  // namespace setdet
