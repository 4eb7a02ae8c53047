#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rawformer {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed on-disk data. Carries the byte offset where parsing stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset);
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class KeyError : public Error {
 public:
  using Error::Error;
};

class ModelError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an API contract that cannot be expressed in types,
/// e.g. passing gradient-linked tensors where detached ones are required.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf detected in a forward value, gradient or loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace rawformer
