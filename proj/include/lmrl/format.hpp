#pragma once

#include <charconv>
#include <string>

namespace lmrl {

// Shortest decimal that parses back to the same float.
inline std::string format_float(float value) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, end);
}

inline std::string format_double(double value) {
  char buf[40];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, end);
}

}  // namespace lmrl
