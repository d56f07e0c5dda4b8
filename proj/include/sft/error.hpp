#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace sft {

enum class ErrorKind : std::uint8_t {
  NonPositiveDepth,
  BadFacet,
  BadWeights,
  OutOfDomain,
  InvalidMesh,
  InvalidArgument,
  NonFiniteGradient,
  DidNotConverge,
  EmptyMatches,
  ArchitectureMismatch,
  LengthMismatch,
  SingularSystem,
  Diverged,
  BadResolution,
  ScheduleOutOfRange,
  ShapeMismatch,
  FileNotFound,
  ParseError,
};

constexpr std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::NonPositiveDepth: return "NonPositiveDepth";
    case ErrorKind::BadFacet: return "BadFacet";
    case ErrorKind::BadWeights: return "BadWeights";
    case ErrorKind::OutOfDomain: return "OutOfDomain";
    case ErrorKind::InvalidMesh: return "InvalidMesh";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::DidNotConverge: return "DidNotConverge";
    case ErrorKind::EmptyMatches: return "EmptyMatches";
    case ErrorKind::ArchitectureMismatch: return "ArchitectureMismatch";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::SingularSystem: return "SingularSystem";
    case ErrorKind::Diverged: return "Diverged";
    case ErrorKind::BadResolution: return "BadResolution";
    case ErrorKind::ScheduleOutOfRange: return "ScheduleOutOfRange";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::FileNotFound: return "FileNotFound";
    case ErrorKind::ParseError: return "ParseError";
  }
  return "Unknown";
}

/// Every failure raised by the library. `index()` carries the offending
/// element (match, facet, frame, ...) when one is meaningful.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what, std::optional<std::size_t> index = std::nullopt)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind), index_(index) {}

  ErrorKind kind() const noexcept { return kind_; }
  std::optional<std::size_t> index() const noexcept { return index_; }

 private:
  ErrorKind kind_;
  std::optional<std::size_t> index_;
};

}  // namespace sft
