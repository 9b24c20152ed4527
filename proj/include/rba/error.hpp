#pragma once

#include <stdexcept>
#include <string>

namespace rba {

// Error categories map one-to-one onto the machine-readable "category"
// emitted by the CLI and onto its exit codes.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* category() const noexcept { return "error"; }
};

// Shape or dimension mismatch between tensors.
struct ShapeError : Error {
  using Error::Error;
  const char* category() const noexcept override { return "shape"; }
};

// Domain violation or non-finite value in a numeric kernel.
struct NumericError : Error {
  using Error::Error;
  const char* category() const noexcept override { return "numeric"; }
};

// Invalid or inconsistent configuration.
struct ConfigError : Error {
  using Error::Error;
  const char* category() const noexcept override { return "config"; }
};

// Malformed input data (dataset files, token ids out of range).
struct DataError : Error {
  using Error::Error;
  const char* category() const noexcept override { return "data"; }
};

// Checkpoint file corruption or mismatch against the model.
struct CheckpointError : Error {
  using Error::Error;
  const char* category() const noexcept override { return "checkpoint"; }
};

// Misuse of the tape contract (non-scalar loss, double backward).
struct TapeError : Error {
  using Error::Error;
  const char* category() const noexcept override { return "tape"; }
};

}  // namespace rba
