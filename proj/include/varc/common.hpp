#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace varc {

// Cell alphabet: 10 puzzle colors plus the background fill and the border
// marker used to delimit output shape on the canvas.
constexpr int kNumColors = 10;
constexpr int kNumSymbols = 12;
constexpr std::uint8_t kBG = 10;
constexpr std::uint8_t kBD = 11;

enum class Errc {
  RaggedRows,
  ColorOutOfRange,
  EmptyGrid,
  MissingField,
  EmptyTaskSet,
  UnknownTaskId,
  ShapeMismatch,
  ScaleOverflow,
  PlacementOverflow,
  NoFeasibleView,
  TaskIndexOutOfRange,
  EmptyMask,
  StepOutOfRange,
  CoordinatesOutOfRange,
  BadCheckpoint,
  BadConfig,
  IoError,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::RaggedRows: return "RaggedRows";
    case Errc::ColorOutOfRange: return "ColorOutOfRange";
    case Errc::EmptyGrid: return "EmptyGrid";
    case Errc::MissingField: return "MissingField";
    case Errc::EmptyTaskSet: return "EmptyTaskSet";
    case Errc::UnknownTaskId: return "UnknownTaskId";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::ScaleOverflow: return "ScaleOverflow";
    case Errc::PlacementOverflow: return "PlacementOverflow";
    case Errc::NoFeasibleView: return "NoFeasibleView";
    case Errc::TaskIndexOutOfRange: return "TaskIndexOutOfRange";
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::StepOutOfRange: return "StepOutOfRange";
    case Errc::CoordinatesOutOfRange: return "CoordinatesOutOfRange";
    case Errc::BadCheckpoint: return "BadCheckpoint";
    case Errc::BadConfig: return "BadConfig";
    case Errc::IoError: return "IoError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg)
      : std::runtime_error(std::string(errc_name(code)) + ": " + msg),
        code_(code),
        message_(msg) {}
  Errc code() const { return code_; }
  // The description alone, without the leading error-class name.
  const std::string& message() const { return message_; }

 private:
  Errc code_;
  std::string message_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

inline void check(bool cond, Errc code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

}  // namespace varc
