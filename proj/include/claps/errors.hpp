#pragma once

#include <stdexcept>
#include <string>

namespace claps {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shapes or lengths disagree.
struct ShapeError : Error {
  using Error::Error;
};

// An argument value is outside its legal range (non-positive temperature,
// beam width < 1, ...).
struct ValueError : Error {
  using Error::Error;
};

// A token or class index is out of range.
struct IndexError : Error {
  using Error::Error;
};

// A forward op produced NaN or Inf.
struct NumericError : Error {
  using Error::Error;
};

// Input is degenerate for the requested operation (zero-norm vector,
// all-pad sequence, rank-0 point cloud).
struct DegenerateInputError : Error {
  using Error::Error;
};

// A perturbation direction has (numerically) zero norm; the caller skips
// the perturbed example for this step.
struct ZeroGradientError : Error {
  using Error::Error;
};

// A contrastive anchor has no candidates to contrast against.
struct InsufficientCandidatesError : Error {
  using Error::Error;
};

// Bad run configuration (batch of 1 in a contrastive mode, vocab too small).
struct ConfigError : Error {
  using Error::Error;
};

// Malformed model input (over-length sequence, invalid token id, missing BOS).
struct InputError : Error {
  using Error::Error;
};

// A corpus line failed to parse; the message names the line.
struct ParseError : Error {
  using Error::Error;
};

// A corpus record is missing a required field.
struct SchemaError : Error {
  using Error::Error;
};

struct CheckpointError : Error {
  using Error::Error;
};
struct CorruptCheckpointError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct VersionMismatchError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct TruncatedCheckpointError : CheckpointError {
  using CheckpointError::CheckpointError;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace claps
