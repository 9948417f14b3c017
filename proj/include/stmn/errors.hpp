#pragma once

#include <stdexcept>
#include <string>

namespace stmn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// API misuse: missing cache, empty inputs, bad call order.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values (channel counts, radii, schedule).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input violates an operation precondition (e.g. negative input to BN*).
class ContractError : public Error {
 public:
  using Error::Error;
};

// The finite-difference oracle produced a non-finite evaluation.
class OracleError : public Error {
 public:
  using Error::Error;
};

// A synthetic sequence spec that cannot be rendered as requested.
class SpecError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace stmn
