#pragma once

#include <stdexcept>
#include <string>

namespace pvseg {

/// Raised when a caller-supplied value violates a documented contract
/// (bad coordinates, non-binary masks, malformed configs). Maps to CLI exit
/// code 2 and HTTP 422.
class ValidationError : public std::invalid_argument {
public:
  explicit ValidationError(const std::string& what, std::string field = {})
      : std::invalid_argument(what), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

private:
  std::string field_;
};

class ConfigError : public ValidationError {
public:
  using ValidationError::ValidationError;
};

/// Tensor shape/resolution mismatch.
class ShapeError : public ValidationError {
public:
  using ValidationError::ValidationError;
};

/// Dataset on disk is missing or inconsistent. `path()` names the offending file.
class DatasetError : public std::runtime_error {
public:
  DatasetError(const std::string& what, std::string path)
      : std::runtime_error(what), path_(std::move(path)) {}

  const std::string& path() const noexcept { return path_; }

private:
  std::string path_;
};

class TrainingError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

}  // namespace pvseg
