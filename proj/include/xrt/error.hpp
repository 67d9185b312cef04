#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xrt {

/// Error categories surfaced across module boundaries. Each maps to a stable
/// machine-readable name (see errc_name) used by the CLI and the service.
enum class Errc {
  invalid_argument,
  shape_mismatch,
  io,
  bad_magic,
  unsupported_version,
  truncated,
  checksum_mismatch,
  format,
  decode,
};

constexpr std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::io: return "io_error";
    case Errc::bad_magic: return "bad_magic";
    case Errc::unsupported_version: return "unsupported_version";
    case Errc::truncated: return "truncated";
    case Errc::checksum_mismatch: return "checksum_mismatch";
    case Errc::format: return "format_error";
    case Errc::decode: return "decode_error";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

inline void require(bool condition, Errc code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

}  // namespace xrt
