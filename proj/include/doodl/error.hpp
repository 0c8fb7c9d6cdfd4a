// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace doodl {

// Base of everything the library throws on contract violations.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Input is well-formed but the operation has no meaningful result (zero norm, ...).
class DegenerateInput : public Error {
 public:
  using Error::Error;
};

// A NaN/Inf appeared mid-computation. `step` carries the chain step or
// optimizer iteration where it was observed, or -1 when not applicable.
class NumericalFailure : public Error {
 public:
  NumericalFailure(const std::string& what, int step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

class ResourceError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

class MagicMismatch : public LoadError {
 public:
  using LoadError::LoadError;
};

class UnsupportedVersion : public LoadError {
 public:
  using LoadError::LoadError;
};

class TruncatedFile : public LoadError {
 public:
  using LoadError::LoadError;
};

namespace detail {

[[noreturn]] inline void fail_invalid(const std::string& msg) { throw InvalidArgument(msg); }

inline void require(bool ok, const char* msg) {
  if (!ok) throw InvalidArgument(msg);
}

}  // namespace detail
}  // namespace doodl
