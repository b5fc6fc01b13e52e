#pragma once

#include <stdexcept>
#include <string>

namespace reneg {

/// Base class for every error raised by the library. `code()` is a stable,
/// machine-parsable identifier (the CLI prints it verbatim).
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define RENEG_DEFINE_ERROR(Name)                                           \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(#Name, what) {}         \
  };

RENEG_DEFINE_ERROR(InvalidArgument)
RENEG_DEFINE_ERROR(InvalidTrack)
RENEG_DEFINE_ERROR(SimDiverged)
RENEG_DEFINE_ERROR(EmptyBatch)
RENEG_DEFINE_ERROR(AlignmentGap)
RENEG_DEFINE_ERROR(ShapeMismatch)
RENEG_DEFINE_ERROR(NonFiniteLoss)
RENEG_DEFINE_ERROR(NoPositiveData)
RENEG_DEFINE_ERROR(ProtocolError)
RENEG_DEFINE_ERROR(IoError)

#undef RENEG_DEFINE_ERROR

/// Malformed input file. Carries the 1-based line number of the offending line.
class FormatError : public Error {
 public:
  FormatError(std::size_t line, const std::string& what)
      : Error("FormatError", "line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class VersionError : public Error {
 public:
  explicit VersionError(const std::string& what) : Error("VersionError", what) {}
};

}  // namespace reneg
