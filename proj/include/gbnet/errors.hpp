#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gbnet {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dimension mismatch between operands, heads, or stored tensors.
struct ShapeError : Error {
  using Error::Error;
};

// NaN or Inf produced anywhere in the numeric core.
struct NumericError : Error {
  using Error::Error;
};

// Operation invoked in the wrong state (e.g. backprop on an empty tape).
struct StateError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct InputError : Error {
  using Error::Error;
};

struct ModeError : Error {
  using Error::Error;
};

struct MalformedBoxError : InputError {
  using InputError::InputError;
};

struct UniquenessError : InputError {
  using InputError::InputError;
};

struct SignatureError : InputError {
  using InputError::InputError;
};

// Text-file parse failure; line is 1-based, 0 when not tied to a line.
struct ParseError : Error {
  ParseError(const std::string& what, std::size_t line_no)
      : Error(line_no ? "line " + std::to_string(line_no) + ": " + what : what), line(line_no) {}
  std::size_t line;
};

struct VocabularyError : ParseError {
  using ParseError::ParseError;
};

// Binary file failure: bad magic, truncation, checksum mismatch.
struct FormatError : Error {
  using Error::Error;
};

}  // namespace gbnet
