#pragma once

#include <stdexcept>
#include <string>

namespace gramclust {

/// Raised for invalid configuration (bad enum value, missing field, out-of-range
/// parameter). The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class IoErrorKind {
  OpenFailed,
  WriteFailed,
  BadMagic,
  BadVersion,
  TruncatedPayload,
  SizeMismatch,
  NonFiniteEntry,
};

/// File-level failure with the offending path and a distinct kind per failure mode.
class IoError : public std::runtime_error {
public:
  IoError(IoErrorKind kind, const std::string& path, const std::string& msg)
      : std::runtime_error(msg + " (" + path + ")"), kind_(kind), path_(path) {}

  IoErrorKind kind() const { return kind_; }
  const std::string& path() const { return path_; }

private:
  IoErrorKind kind_;
  std::string path_;
};

}  // namespace gramclust
