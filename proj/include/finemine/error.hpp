#pragma once

#include <stdexcept>
#include <string>

namespace finemine {

// Bad arguments or configuration. CLI exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Filesystem failures. CLI exit code 2.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Data on disk that parses but is corrupt or violates an invariant.
class IntegrityError : public IoError {
 public:
  using IoError::IoError;
};

// Training diverged (non-finite loss).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace finemine
