#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace consolidate {

/// Machine-readable category of a domain failure. The CLI prints these as
/// `ERROR <code>: <detail>`.
enum class ErrorCode {
    shape,
    data,
    singular,
    validation,
    io,
    magic,
    version,
    truncated,
    length,
    format,
    incompatible,
    recipe,
    rank,
    degenerate,
    infeasible,
    divergence,
    usage,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::shape: return "shape";
        case ErrorCode::data: return "data";
        case ErrorCode::singular: return "singular";
        case ErrorCode::validation: return "validation";
        case ErrorCode::io: return "io";
        case ErrorCode::magic: return "magic";
        case ErrorCode::version: return "version";
        case ErrorCode::truncated: return "truncated";
        case ErrorCode::length: return "length";
        case ErrorCode::format: return "format";
        case ErrorCode::incompatible: return "incompatible";
        case ErrorCode::recipe: return "recipe";
        case ErrorCode::rank: return "rank";
        case ErrorCode::degenerate: return "degenerate";
        case ErrorCode::infeasible: return "infeasible";
        case ErrorCode::divergence: return "divergence";
        case ErrorCode::usage: return "usage";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& detail,
          std::optional<std::size_t> offset = std::nullopt)
        : std::runtime_error(detail), code_(code), offset_(offset) {}

    ErrorCode code() const noexcept { return code_; }

    /// Byte offset for file-format errors.
    std::optional<std::size_t> offset() const noexcept { return offset_; }

private:
    ErrorCode code_;
    std::optional<std::size_t> offset_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& detail) {
    throw Error(code, detail);
}

[[noreturn]] inline void fail_at(ErrorCode code, const std::string& detail, std::size_t offset) {
    throw Error(code, detail + " (byte offset " + std::to_string(offset) + ")", offset);
}

}  // namespace consolidate
