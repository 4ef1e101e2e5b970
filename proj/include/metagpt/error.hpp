#pragma once

#include <stdexcept>
#include <string>

namespace metagpt {

/// Broad failure classes. The CLI maps them onto its exit codes.
enum class ErrorKind {
  usage,  // malformed request: bad recipe, out-of-range knob, unknown name
  data,   // malformed or incompatible input files, non-finite values
  io,     // filesystem failures
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void throw_usage(const std::string& what) { throw Error(ErrorKind::usage, what); }
[[noreturn]] inline void throw_data(const std::string& what) { throw Error(ErrorKind::data, what); }
[[noreturn]] inline void throw_io(const std::string& what) { throw Error(ErrorKind::io, what); }

}  // namespace metagpt
