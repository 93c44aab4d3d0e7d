#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace uprobe {

// Error kinds surface in CLI error JSON as the "kind" field.
enum class ErrorKind {
    io,
    config,
    parse,
    dimension,
    invalid_distribution,
    data,
    training,
    endpoint,
};

constexpr std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::io: return "io";
        case ErrorKind::config: return "config";
        case ErrorKind::parse: return "parse";
        case ErrorKind::dimension: return "dimension";
        case ErrorKind::invalid_distribution: return "invalid_distribution";
        case ErrorKind::data: return "data";
        case ErrorKind::training: return "training";
        case ErrorKind::endpoint: return "endpoint";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct IoError : Error {
    explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

struct InvalidDistribution : Error {
    explicit InvalidDistribution(const std::string& what)
        : Error(ErrorKind::invalid_distribution, what) {}
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& what) : Error(ErrorKind::dimension, what) {}
};

struct DataError : Error {
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

// Record-file parse failures carry a sub-kind so callers can tell them apart.
class ParseError : public Error {
public:
    enum class Reason { bad_magic, version_mismatch, truncated, malformed, count_mismatch };

    ParseError(Reason reason, const std::string& what) : Error(ErrorKind::parse, what), reason_(reason) {}
    Reason reason() const noexcept { return reason_; }

private:
    Reason reason_;
};

class TrainingError : public Error {
public:
    explicit TrainingError(const std::string& what) : Error(ErrorKind::training, what) {}
};

// Wire-protocol failures; `candidate` is set by the ICLT harness when a
// per-candidate query fails.
class EndpointError : public Error {
public:
    enum class Reason { transport, timeout, malformed_reply, vocab_mismatch, server_error, inconsistent_reply };

    EndpointError(Reason reason, const std::string& what) : Error(ErrorKind::endpoint, what), reason_(reason) {}
    Reason reason() const noexcept { return reason_; }

    int candidate = -1;

private:
    Reason reason_;
};

}  // namespace uprobe
