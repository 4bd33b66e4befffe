#pragma once

#include <stdexcept>
#include <string>

namespace avw2 {

enum class ErrorKind {
  Shape,      // incompatible tensor shapes
  Domain,     // argument outside an operation's domain
  Numeric,    // NaN / Inf produced or consumed
  Infeasible, // CTC target cannot be aligned to the input length
  Data,       // corpus or checkpoint content is invalid
  Io,         // filesystem failure
  Usage,      // bad command-line or config input
};

const char* errorKindName(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const {
    return kind_;
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

} // namespace avw2
