#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mulferl {

// Broken caller contract (precondition violated by code, not by data).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class UnknownTokenError : public std::invalid_argument {
 public:
  UnknownTokenError(std::size_t position, long long token)
      : std::invalid_argument("unknown token " + std::to_string(token) +
                              " at position " + std::to_string(position)),
        position_(position) {}

  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

// Invalid run configuration; `field` names the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Failure talking to a feedback simulator. Carries the number of attempts
// made and, for protocol errors, the raw payload that failed validation.
class SimulatorError : public std::runtime_error {
 public:
  SimulatorError(const std::string& message, int attempts, bool retriable,
                 std::string payload = {})
      : std::runtime_error(message),
        attempts_(attempts),
        retriable_(retriable),
        payload_(std::move(payload)) {}

  int attempts() const noexcept { return attempts_; }
  bool retriable() const noexcept { return retriable_; }
  const std::string& payload() const noexcept { return payload_; }

 private:
  int attempts_;
  bool retriable_;
  std::string payload_;
};

}  // namespace mulferl
