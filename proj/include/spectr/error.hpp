#pragma once

#include <stdexcept>
#include <string>

namespace spectr {

// Error taxonomy. Shape/domain/contract errors indicate caller bugs,
// numeric errors indicate NaN/Inf surfaced mid-computation, config/format
// errors indicate bad user inputs (exit code 2 territory in the CLI).
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

class ContractError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace spectr
