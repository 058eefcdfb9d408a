#pragma once

#include <stdexcept>
#include <string>

namespace ctl {

// Base of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dimension or spec mismatch between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Argument outside its documented domain (alpha outside [0,1], bad label, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or a numerical routine that could not proceed.
class NumericError : public Error {
 public:
  using Error::Error;
};

// IDX reader failures. Each kind is distinguishable by type.
class IdxError : public Error {
 public:
  using Error::Error;
};
class IdxMagicError : public IdxError {
 public:
  using IdxError::IdxError;
};
class IdxTruncatedError : public IdxError {
 public:
  using IdxError::IdxError;
};
class IdxCountMismatchError : public IdxError {
 public:
  using IdxError::IdxError;
};

// Checkpoint persistence failures.
class CheckpointError : public Error {
 public:
  using Error::Error;
};
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointSchemaError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace ctl
