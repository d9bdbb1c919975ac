#pragma once

#include <stdexcept>
#include <string>

namespace graphsc {

/// Coarse failure category. The CLI maps these onto its exit codes.
enum class ErrorKind { validation, numerical, io };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail_validation(const std::string& what) {
  throw Error(ErrorKind::validation, what);
}
[[noreturn]] inline void fail_numerical(const std::string& what) {
  throw Error(ErrorKind::numerical, what);
}
[[noreturn]] inline void fail_io(const std::string& what) { throw Error(ErrorKind::io, what); }

}  // namespace graphsc
