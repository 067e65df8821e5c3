#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mifomo {

enum class ErrorKind {
  Dimension,
  Numeric,
  Contract,
  Validation,
  Config,
  Format,
  Sampling,
  Render,
  Io,
};

const char* error_kind_name(ErrorKind kind) noexcept;

/// Base of every exception thrown by the library. The C API maps `kind()` onto
/// its status codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& m) : Error(ErrorKind::Dimension, m) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& m) : Error(ErrorKind::Numeric, m) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& m) : Error(ErrorKind::Contract, m) {}
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& m) : Error(ErrorKind::Validation, m) {}
};

class ConfigError : public Error {
 public:
  ConfigError(const std::string& key, const std::string& m)
      : Error(ErrorKind::Config, key.empty() ? m : key + ": " + m), key_(key) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class FormatError : public Error {
 public:
  FormatError(std::size_t offset, const std::string& m)
      : Error(ErrorKind::Format, m + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class SamplingError : public Error {
 public:
  explicit SamplingError(const std::string& m) : Error(ErrorKind::Sampling, m) {}
};

class RenderError : public Error {
 public:
  explicit RenderError(const std::string& m) : Error(ErrorKind::Render, m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error(ErrorKind::Io, m) {}
};

}  // namespace mifomo
