#include "hgn/error.hpp"

namespace hgn {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_input: return "invalid_input";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::overflow: return "overflow";
    case ErrorCode::format: return "format";
    case ErrorCode::version_mismatch: return "version_mismatch";
    case ErrorCode::config: return "config";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace hgn
