#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace msf {

/// Base for every error the library raises on purpose.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or option mismatch between components (wrong input size, bad config key).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Caller supplied data that violates an operation's preconditions.
class InputError : public Error {
public:
    using Error::Error;
};

/// Non-finite values encountered during optimization.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Malformed or truncated binary container. Carries the byte offset where decoding failed.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::uint64_t offset)
        : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

}  // namespace msf
