#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace capseg {

// Shape/dimension violations (bad extents, rank mismatch, channel mismatch).
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// API contract violations (non-scalar loss, missing gradient key, K = 0).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Malformed on-disk data; carries the byte offset where parsing failed.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::uint64_t offset)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}
    std::uint64_t offset() const { return offset_; }

private:
    std::uint64_t offset_;
};

// Bad run configuration (unknown key, type error, invalid value).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operation not applicable to the given input (e.g. zero_channel on 1-channel data).
class UnsupportedError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void check_shape(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

inline void check_contract(bool ok, const std::string& msg) {
    if (!ok) throw ContractError(msg);
}

}  // namespace capseg
