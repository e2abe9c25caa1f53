#pragma once

#include <stdexcept>
#include <string>

namespace xdistill {

enum class ErrorCategory { config, io, contract, numeric };

inline const char* to_string(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return "config";
    case ErrorCategory::io: return "io";
    case ErrorCategory::contract: return "contract";
    case ErrorCategory::numeric: return "numeric";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorCategory::config, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorCategory::io, w) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error(ErrorCategory::contract, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorCategory::numeric, w) {}
};

/// Shape errors are contract violations that carry both shapes in the message.
struct DimensionError : ContractError {
  explicit DimensionError(const std::string& w) : ContractError(w) {}
};

#define XD_REQUIRE(cond, ErrType, msg)  \
  do {                                  \
    if (!(cond)) throw ErrType(msg);    \
  } while (0)

}  // namespace xdistill
