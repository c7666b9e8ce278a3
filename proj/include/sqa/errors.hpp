#pragma once

#include <stdexcept>
#include <string>

namespace sqa {

// Base class for all errors raised by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed container / unparsable file contents.
struct FormatError : Error {
  using Error::Error;
};

// Recognized container but unsupported encoding.
struct UnsupportedError : Error {
  using Error::Error;
};

// A clip with no samples where audio is required.
struct EmptyClipError : Error {
  using Error::Error;
};

// Caller violated a documented precondition (non-finite sample, bad range).
struct ValidationError : Error {
  using Error::Error;
};

// Filesystem-level failure (unreadable / unwritable path).
struct IoError : Error {
  using Error::Error;
};

// Bad user-facing configuration; maps to CLI exit code 2.
struct ConfigError : Error {
  using Error::Error;
};

// Tensor shape mismatch in the compute graph.
struct ShapeError : Error {
  using Error::Error;
};

// Operation invoked in an invalid sequence (e.g. backward without a fresh tape).
struct StateError : Error {
  using Error::Error;
};

// Input too short for the requested transform.
struct TooShortError : Error {
  using Error::Error;
};

// Degenerate data input (silent noise source, empty sequence, ...).
struct DegenerateInputError : Error {
  using Error::Error;
};

// Rater response carried no parseable score.
struct LabelParseError : Error {
  using Error::Error;
};

// Correlation of a constant sequence; never silently coerced to 0.
struct UndefinedCorrelationError : Error {
  using Error::Error;
};

// Dataset-level failure budget exceeded (unreadable clips, rejected rows).
struct DataError : Error {
  using Error::Error;
};

// Training diverged or hit non-finite values.
struct TrainingError : Error {
  using Error::Error;
};

}  // namespace sqa
