#pragma once

#include <stdexcept>
#include <string>

namespace fedq {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Input tensor is all zeros; no meaningful clipping threshold exists.
struct DegenerateTensor : Error {
  using Error::Error;
};

/// NaN or Inf encountered where finite values are required.
struct NonFiniteInput : Error {
  using Error::Error;
};

/// Serialized payload fails structural validation (magic, version, bounds).
struct CorruptPayload : Error {
  using Error::Error;
};

/// Update cannot be serialized (out-of-range index, inconsistent fields).
struct EncodeError : Error {
  using Error::Error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct EmptyDataset : Error {
  using Error::Error;
};

struct PartitionError : Error {
  using Error::Error;
};

/// Malformed dataset file (bad magic, truncation, wrong record size).
struct FormatError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

}  // namespace fedq
