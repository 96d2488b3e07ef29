#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace fd {

using i64 = std::int64_t;

// Row-major extents, outermost first. Rank-0 (empty) means scalar.
using Shape = std::vector<i64>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline i64 numel(const Shape& s) {
  i64 n = 1;
  for (i64 d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace fd

#define FD_CHECK(cond, msg)              \
  do {                                   \
    if (!(cond)) ::fd::fail(msg);        \
  } while (0)
