#include "cvtrace/error.hpp"

namespace cvtrace {

char const* error_code_name(ErrorCode code) {
  switch (code) {
  case ErrorCode::input: return "InputError";
  case ErrorCode::format: return "FormatError";
  case ErrorCode::shape: return "ShapeError";
  case ErrorCode::missing_tensor: return "MissingTensorError";
  case ErrorCode::index: return "IndexError";
  case ErrorCode::io: return "IoError";
  case ErrorCode::validation: return "ValidationError";
  case ErrorCode::training_diverged: return "TrainingDivergedError";
  case ErrorCode::scorer_unavailable: return "ScorerUnavailableError";
  case ErrorCode::scorer_format: return "ScorerFormatError";
  case ErrorCode::degenerate_vector: return "DegenerateVectorError";
  case ErrorCode::internal: return "InternalError";
  }
  return "UnknownError";
}

void throw_error(ErrorCode code, std::string const& message) {
  switch (code) {
  case ErrorCode::input: throw InputError(message);
  case ErrorCode::format: throw FormatError(message);
  case ErrorCode::shape: throw ShapeError(message);
  case ErrorCode::missing_tensor: throw MissingTensorError(message);
  case ErrorCode::index: throw IndexError(message);
  case ErrorCode::io: throw IoError(message);
  case ErrorCode::validation: throw ValidationError(message);
  case ErrorCode::training_diverged: throw TrainingDivergedError(message);
  case ErrorCode::scorer_unavailable: throw ScorerUnavailableError(message);
  case ErrorCode::scorer_format: throw ScorerFormatError(message);
  case ErrorCode::degenerate_vector: throw DegenerateVectorError(message);
  case ErrorCode::internal: break;
  }
  throw Error(ErrorCode::internal, message);
}

} // namespace cvtrace
