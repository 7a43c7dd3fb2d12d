#pragma once

#include <stdexcept>
#include <string>

namespace stepflow {

// Base of every error the library throws; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An argument lies outside the mathematical domain of a function.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Inputs violate a documented precondition (shape, normalization, length).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Inconsistent or malformed configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// An observation has zero likelihood under every support element.
class EvidenceError : public Error {
 public:
  using Error::Error;
};

// A numerical guard tripped (divergence, degenerate renormalization).
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace stepflow
