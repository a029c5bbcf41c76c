// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace headforge {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class InvalidRangeError : public Error {
 public:
  using Error::Error;
};

/// Mesh or grid failed a structural check (watertightness, degenerate faces, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error(what), line_(0) {}
  ParseError(const std::string& what, int line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  /// 0 when the input has no line structure.
  int line() const noexcept { return line_; }

 private:
  int line_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ContractViolation : public Error {
 public:
  using Error::Error;
};

class PoisonedParameterError : public Error {
 public:
  using Error::Error;
};

class PoisonedGradientError : public Error {
 public:
  using Error::Error;
};

/// Transport-level failure talking to a score service; callers may retry.
class TransportError : public Error {
 public:
  using Error::Error;
};

/// Non-retriable misconfiguration (protocol version mismatch, bad config keys).
class ConfigError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

}  // namespace headforge
