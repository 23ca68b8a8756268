#pragma once

#include <stdexcept>
#include <string>

namespace ditctrl {

// Error categories. The CLI maps each one to a fixed exit code.
enum class ErrorKind {
    Shape,          // dimension / rank / index mismatch
    NonFinite,      // NaN or Inf encountered
    Config,         // schema violation or out-of-range value
    Io,             // file missing, unreadable, malformed
    DegenerateMask, // a masked attention branch has no keys
    Metric,         // metric undefined for the given input
    Invalid,        // any other violated precondition
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Shape: return "shape";
        case ErrorKind::NonFinite: return "non-finite";
        case ErrorKind::Config: return "config";
        case ErrorKind::Io: return "io";
        case ErrorKind::DegenerateMask: return "degenerate-mask";
        case ErrorKind::Metric: return "metric";
        case ErrorKind::Invalid: return "invalid";
    }
    return "unknown";
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) fail(kind, what);
}

} // namespace ditctrl
