#pragma once

#include <stdexcept>
#include <string>

namespace segkd {

// Structural problems: tensor ranks, channel counts, incompatible shapes.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

// Bad user-supplied configuration (resolutions, weights, missing inputs).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// NaN/Inf where finite values are required.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

// Filesystem and codec failures; message names the offending path.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

// Invalid data contents (non-binary masks, malformed documents, unknown keys).
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error("validation error: " + msg) {}
};

}  // namespace segkd
