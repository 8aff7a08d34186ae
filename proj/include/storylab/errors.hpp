#pragma once

#include <stdexcept>
#include <string>

namespace storylab {

/// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An id or index outside its valid range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// A caller violated an operation's precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid model, training or run configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing, empty or malformed input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values encountered during optimization.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::string parameter)
      : std::runtime_error(what), parameter_(std::move(parameter)) {}
  const std::string& parameter() const noexcept { return parameter_; }

 private:
  std::string parameter_;
};

/// A word list produced no usable token set.
class TokenSetError : public DataError {
 public:
  using DataError::DataError;
};

/// A judge reply that does not contain valid scores.
class ScoringError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File container corruption or version mismatch.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace storylab
