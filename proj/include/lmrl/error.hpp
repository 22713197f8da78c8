#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lmrl {

enum class ErrorKind {
  dimension,
  vocabulary,
  contract,
  context_length,
  missing_grad,
  degenerate_input,
  io,
  config,
  format,
  modality,
};

std::string_view to_string(ErrorKind kind);

/// Every failure raised by the library. `kind` is stable and machine-readable;
/// the CLI prints it as the first field of its one-line error report.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace lmrl
