#pragma once

#include <stdexcept>
#include <string>

namespace fstm {

enum class ErrorKind {
  invalid_argument,
  shape,
  domain,
  numeric,
  config,
  io,
  format,
};

const char* to_string(ErrorKind kind) noexcept;

// Every failure raised by the core library. The C API maps `kind()` onto a
// status code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) throw Error(kind, msg);
}

}  // namespace fstm
