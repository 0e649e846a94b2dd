#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mvlab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument outside the operation's domain (bad time, empty interval, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Grid too coarse for the requested operator.
class ResolutionError : public DomainError {
 public:
  using DomainError::DomainError;
};

/// Problem size the exact algorithm refuses to handle.
class UnsupportedSizeError : public DomainError {
 public:
  using DomainError::DomainError;
};

/// Failure inside a numerical routine (factorization, overflow, NaN).
class NumericError : public Error {
 public:
  using Error::Error;
};

class SingularDriftError : public NumericError {
 public:
  SingularDriftError(std::size_t path_id, std::size_t node, const std::string& what)
      : NumericError("singular drift at path " + std::to_string(path_id) + ", node " +
                     std::to_string(node) + ": " + what),
        path_id_(path_id),
        node_(node) {}

  std::size_t path_id() const noexcept { return path_id_; }
  std::size_t node() const noexcept { return node_; }

 private:
  std::size_t path_id_;
  std::size_t node_;
};

/// exp(|f|^2) overflowed while forming a weighted-Pinsker factor.
class DivergentWeightError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Bad or incomplete run configuration. `key` is the dotted config path.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error(key.empty() ? what : what + ": " + key), key_(std::move(key)) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

}  // namespace mvlab
