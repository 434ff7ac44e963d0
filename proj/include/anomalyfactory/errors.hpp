#pragma once

#include <stdexcept>
#include <string>

namespace af {

// Base for every error thrown by the library. The CLI maps ContractError and
// its relatives to exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class LoadError : public IoError {
 public:
  using IoError::IoError;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, int line) : Error(what), line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API precondition (shape mismatch, wrong stage, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ParameterError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ProtocolError : public ContractError {
 public:
  using ContractError::ContractError;
};

class SelectionError : public Error {
 public:
  using Error::Error;
};

class EditError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class UndefinedScoreError : public Error {
 public:
  using Error::Error;
};

}  // namespace af
