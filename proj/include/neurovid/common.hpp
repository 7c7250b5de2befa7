#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace neurovid {

// Error taxonomy shared by the whole library. The C API and the CLI map
// these onto status / exit codes (config -> 2, dependency -> 3, numeric -> 4).
enum class ErrorKind {
    Config,      // bad configuration or rejected input
    Validation,  // violated data invariant (duplicate names, bad shapes, ...)
    Dependency,  // missing upstream artifact
    Numeric,     // numerical failure (NaN loss, singular matrix, ...)
    Format,      // malformed on-disk data
    Io,          // filesystem failure
    Index,       // out-of-range access (layer index, diffusion step, ...)
};

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

  private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) fail(kind, msg);
}

}  // namespace neurovid
