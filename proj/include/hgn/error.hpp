#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hgn {

enum class ErrorCode {
  invalid_input,
  shape_mismatch,
  overflow,
  format,
  version_mismatch,
  config,
  io,
};

std::string_view to_string(ErrorCode code);

// Base exception for all library failures. The code is stable and is what the
// CLI maps onto exit statuses.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& what);

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace hgn
