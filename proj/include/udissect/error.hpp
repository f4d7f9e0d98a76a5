#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace udissect {

enum class ErrorKind {
  ShapeMismatch,
  NonFinite,
  NonScalarRoot,
  TokenOutOfRange,
  LengthExceeded,
  ConfigMismatch,
  LayerOutOfRange,
  InvalidArgument,
  VocabOverflow,
  NoDonorConcepts,
  UnknownConcept,
  EmptyRetain,
  Divergence,
  InsufficientQuestions,
  TraceMismatch,
  DegenerateBaseline,
  EmptyReference,
  ConfigParse,
  IoFailure,
  MissingArtifact,
  CorruptCheckpoint,
  StaleArtifact,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::NonScalarRoot: return "NonScalarRoot";
    case ErrorKind::TokenOutOfRange: return "TokenOutOfRange";
    case ErrorKind::LengthExceeded: return "LengthExceeded";
    case ErrorKind::ConfigMismatch: return "ConfigMismatch";
    case ErrorKind::LayerOutOfRange: return "LayerOutOfRange";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::VocabOverflow: return "VocabOverflow";
    case ErrorKind::NoDonorConcepts: return "NoDonorConcepts";
    case ErrorKind::UnknownConcept: return "UnknownConcept";
    case ErrorKind::EmptyRetain: return "EmptyRetain";
    case ErrorKind::Divergence: return "Divergence";
    case ErrorKind::InsufficientQuestions: return "InsufficientQuestions";
    case ErrorKind::TraceMismatch: return "TraceMismatch";
    case ErrorKind::DegenerateBaseline: return "DegenerateBaseline";
    case ErrorKind::EmptyReference: return "EmptyReference";
    case ErrorKind::ConfigParse: return "ConfigParse";
    case ErrorKind::IoFailure: return "IoFailure";
    case ErrorKind::MissingArtifact: return "MissingArtifact";
    case ErrorKind::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorKind::StaleArtifact: return "StaleArtifact";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-readable kind so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace udissect
