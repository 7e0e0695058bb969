#pragma once

#include <stdexcept>
#include <string>

namespace plrank {

// Raised when a caller breaks a documented precondition (shape, length, range).
class ContractViolation : public std::invalid_argument {
 public:
  explicit ContractViolation(const std::string& what) : std::invalid_argument(what) {}
};

class AllZeroRelevance : public std::domain_error {
 public:
  AllZeroRelevance() : std::domain_error("relevance vector has no positive grade") {}
};

class OracleTooLarge : public std::length_error {
 public:
  explicit OracleTooLarge(const std::string& what) : std::length_error(what) {}
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// A loss or gradient became NaN/inf during training.
class NonFiniteLoss : public std::runtime_error {
 public:
  explicit NonFiniteLoss(const std::string& what) : std::runtime_error(what) {}
};

#define PLRANK_EXPECT(cond, msg)                                   \
  do {                                                             \
    if (!(cond)) throw ::plrank::ContractViolation(std::string(msg)); \
  } while (0)

}  // namespace plrank
