#pragma once

#include <stdexcept>
#include <string>

namespace lgpt {

/// Shape mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Caller violated an API precondition (double attachment, backward on a
/// non-scalar, optimizer step over a frozen store, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid configuration or generator parameters.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed dataset content.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf showed up where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Loss over an empty target set.
class DegenerateLossError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Assembled prompt does not fit the LM context window.
class PromptOverflowError : public std::length_error {
 public:
  using std::length_error::length_error;
};

}  // namespace lgpt
