#pragma once

#include <stdexcept>
#include <string>

namespace flowad {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

class SingularityError : public Error {
 public:
  using Error::Error;
};

/// Layer used before it was initialized (e.g. ActNorm without data init).
class StateError : public Error {
 public:
  using Error::Error;
};

class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericsError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk data (IDX files, checkpoints, score tables).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace flowad
