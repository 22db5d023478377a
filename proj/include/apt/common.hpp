#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace apt {

// Error categories shared by the whole engine. The numeric values double as
// the process exit codes of the CLI and the status codes of the C API.
enum class ErrorKind : int {
  config = 2,   // bad configuration / protocol violation
  data = 3,     // bad or inconsistent data (shapes, indices, schemas)
  numeric = 4,  // NaN/Inf, divergence, failed stability checks
  io = 5,       // filesystem and format failures
};

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

void log_warn(const std::string& message);

// Worker-thread cap: min(hardware, APT_THREADS). Always >= 1.
int worker_threads();

}  // namespace apt
