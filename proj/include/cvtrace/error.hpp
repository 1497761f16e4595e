#pragma once

#include <stdexcept>
#include <string>

namespace cvtrace {

enum class ErrorCode {
  input = 1,
  format,
  shape,
  missing_tensor,
  index,
  io,
  validation,
  training_diverged,
  scorer_unavailable,
  scorer_format,
  degenerate_vector,
  internal,
};

char const* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
public:
  Error(ErrorCode code, std::string const& message)
      : std::runtime_error(message), code_(code) {}
  ErrorCode code() const { return code_; }

private:
  ErrorCode code_;
};

#define CVTRACE_DEFINE_ERROR(Name, Code)                                      \
  class Name : public Error {                                                 \
  public:                                                                     \
    explicit Name(std::string const& message) : Error(ErrorCode::Code, message) {} \
  };

CVTRACE_DEFINE_ERROR(InputError, input)
CVTRACE_DEFINE_ERROR(FormatError, format)
CVTRACE_DEFINE_ERROR(ShapeError, shape)
CVTRACE_DEFINE_ERROR(MissingTensorError, missing_tensor)
CVTRACE_DEFINE_ERROR(IndexError, index)
CVTRACE_DEFINE_ERROR(IoError, io)
CVTRACE_DEFINE_ERROR(ValidationError, validation)
CVTRACE_DEFINE_ERROR(TrainingDivergedError, training_diverged)
CVTRACE_DEFINE_ERROR(ScorerUnavailableError, scorer_unavailable)
CVTRACE_DEFINE_ERROR(ScorerFormatError, scorer_format)
CVTRACE_DEFINE_ERROR(DegenerateVectorError, degenerate_vector)

#undef CVTRACE_DEFINE_ERROR

// Throws the Error subclass that corresponds to `code`.
[[noreturn]] void throw_error(ErrorCode code, std::string const& message);

} // namespace cvtrace
