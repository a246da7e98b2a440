#pragma once

#include <stdexcept>
#include <string>

namespace protoscope {

/// Base of every error the library raises. `kind()` is the short tag the CLI
/// prints in its machine-readable error line.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
    virtual const char* kind() const noexcept { return "error"; }
};

/// Bad magic, wrong version, malformed header.
class FormatError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "format"; }
};

/// Truncated or inconsistent payload.
class CorruptionError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "corruption"; }
};

class ValidationError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "validation"; }
};

class IoError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "io"; }
};

/// Non-finite loss or gradient during training.
class DivergenceError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "divergence"; }
};

}  // namespace protoscope
