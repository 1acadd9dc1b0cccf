#pragma once

#include <array>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace fbseg {

// Shape order is (batch, channels, height, width), row-major storage.
using Shape = std::array<int, 4>;

inline std::int64_t shape_numel(const Shape& s) {
  return static_cast<std::int64_t>(s[0]) * s[1] * s[2] * s[3];
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(" << s[0] << "," << s[1] << "," << s[2] << "," << s[3] << ")";
  return os.str();
}

// Error taxonomy; the CLI maps these onto exit codes.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Mode { Train, Eval };

}  // namespace fbseg
