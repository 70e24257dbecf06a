#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace quantaudit {

// Base of every error thrown by the toolkit. Callers that only need a
// diagnostic catch this; the subclasses exist for tests and for the CLI's
// exit-code mapping.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Filesystem failures: missing files, unreadable directories, short writes.
class IoError : public Error {
 public:
  using Error::Error;
};

// A file exists but its content is invalid (bad manifest, truncated blob,
// unknown dtype, duplicate names).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Declared shape disagrees with the data it describes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Precondition violations on numeric inputs (NaN weights, non-positive
// scales, too-short samples, out-of-domain steps).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Perplexity evaluation produced non-finite logits.
class EvaluationError : public Error {
 public:
  EvaluationError(const std::string& what, std::int64_t batch_index)
      : Error(what), batch_index_(batch_index) {}
  std::int64_t batch_index() const noexcept { return batch_index_; }

 private:
  std::int64_t batch_index_;
};

// Training diverged (non-finite loss).
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::int64_t step)
      : Error(what), step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace quantaudit
