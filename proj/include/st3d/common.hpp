#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace st3d {

using i64 = std::int64_t;

// Single exception type used across the library. Messages name the offending
// axis, field, file or line so callers can report them directly.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void check(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

}  // namespace st3d
