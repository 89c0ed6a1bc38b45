#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace oramkit {

/// Base class of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid construction parameters or CLI configuration (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Failures reported by a storage backend or the wire protocol.
class StorageError : public Error {
 public:
  using Error::Error;
};

/// An internal invariant of an ORAM construction was violated.
class InvariantError : public Error {
 public:
  using Error::Error;
};

/// A bucket table received more real items than its bucket size.
class OverflowError : public Error {
 public:
  explicit OverflowError(std::uint64_t bucket)
      : Error("bucket overflow at bucket " + std::to_string(bucket)),
        bucket_(bucket) {}
  std::uint64_t bucket() const { return bucket_; }

 private:
  std::uint64_t bucket_;
};

}  // namespace oramkit
