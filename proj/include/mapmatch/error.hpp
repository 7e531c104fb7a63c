#pragma once

#include <stdexcept>
#include <string>

namespace mapmatch {

/// Base of every error raised by the toolkit. The CLI maps subclasses to
/// exit codes: UsageError -> 2, DataError -> 3, anything else -> 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

/// Bad input data: malformed files, invariant violations, unknown ids.
class DataError : public Error {
 public:
  using Error::Error;
};

class ParseError : public DataError {
 public:
  using DataError::DataError;
};

class ValidationError : public DataError {
 public:
  using DataError::DataError;
};

class UnknownEdge : public DataError {
 public:
  explicit UnknownEdge(long long id)
      : DataError("unknown edge id " + std::to_string(id)), edge_id(id) {}
  long long edge_id;
};

class ExplosionGuard : public DataError {
 public:
  using DataError::DataError;
};

class InsufficientPoints : public DataError {
 public:
  using DataError::DataError;
};

class DegenerateBounds : public DataError {
 public:
  using DataError::DataError;
};

class TooLong : public DataError {
 public:
  using DataError::DataError;
};

class LabelOutOfRange : public DataError {
 public:
  using DataError::DataError;
};

class EmptyMask : public UsageError {
 public:
  using UsageError::UsageError;
};

class NoCapture : public DataError {
 public:
  using DataError::DataError;
};

class NoCandidates : public DataError {
 public:
  explicit NoCandidates(std::size_t index)
      : DataError("no candidate edge within radius for point " +
                  std::to_string(index)),
        point_index(index) {}
  std::size_t point_index;
};

class LengthMismatch : public DataError {
 public:
  using DataError::DataError;
};

class ReferenceTooShort : public DataError {
 public:
  using DataError::DataError;
};

/// Checkpoint version or shape mismatch.
class VersionError : public DataError {
 public:
  using DataError::DataError;
};

class JoinError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace mapmatch
