#pragma once

#include <stdexcept>
#include <string>

namespace cascade {

enum class ErrorKind {
  Usage,
  Validation,
  Parse,
  Io,
  SignalUnavailable,
  FitDegenerate,
  InvalidSpec,
  DiagnosticUndefined,
};

// Single exception type for the library. The kind drives CLI exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[nodiscard]] const char* to_string(ErrorKind kind) noexcept;

}  // namespace cascade
