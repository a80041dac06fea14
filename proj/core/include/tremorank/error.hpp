#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace tremorank {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A value lies outside the domain an operation accepts (rank out of range,
/// non-positive smoothness weight, too few frames, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Tensor or vector dimensions disagree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// An object was used in a state that does not allow the call, e.g. running
/// backward on a cache produced by an inference-mode forward.
class StateError : public Error {
public:
    using Error::Error;
};

/// File could not be opened, read or written.
class IoError : public Error {
public:
    using Error::Error;
};

/// Malformed binary container (clip or checkpoint).
class FormatError : public IoError {
public:
    enum class Kind { bad_magic, version, checksum, truncated, malformed };

    FormatError(Kind kind, const std::string& what, std::uint64_t offset = 0)
        : IoError(what), kind_(kind), offset_(offset) {}

    Kind kind() const noexcept { return kind_; }
    /// Byte offset at which decoding stopped.
    std::uint64_t offset() const noexcept { return offset_; }

private:
    Kind kind_;
    std::uint64_t offset_;
};

/// Experimental protocol violated, e.g. a subject present in both the
/// training and the test split.
class ProtocolError : public Error {
public:
    using Error::Error;
};

}  // namespace tremorank
