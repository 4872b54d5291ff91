#pragma once

#include <stdexcept>
#include <string>

namespace primgen {

// Error categories map 1:1 onto CLI exit codes (see tools/primgen.cpp).
enum class ErrorKind {
  invalid_input,
  unknown_class,
  empty_assembly,
  degenerate_input,
  contract_violation,
  parse,
  version,
  config,
  io,
  length,
  insufficient_input,
  numeric,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::invalid_input: return "invalid-input";
    case ErrorKind::unknown_class: return "unknown-class";
    case ErrorKind::empty_assembly: return "empty-assembly";
    case ErrorKind::degenerate_input: return "degenerate-input";
    case ErrorKind::contract_violation: return "contract-violation";
    case ErrorKind::parse: return "parse";
    case ErrorKind::version: return "version";
    case ErrorKind::config: return "config";
    case ErrorKind::io: return "io";
    case ErrorKind::length: return "length";
    case ErrorKind::insufficient_input: return "insufficient-input";
    case ErrorKind::numeric: return "numeric";
  }
  return "unknown";
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace primgen
