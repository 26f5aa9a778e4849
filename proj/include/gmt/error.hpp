#pragma once

#include <stdexcept>
#include <string>

namespace gmt {

/// Invalid shapes, hyperparameters or file layouts.
class ConfigurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inputs outside the domain of an operation (out-of-range ids, zero-norm rows, all-masked rows).
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint or stream files that are truncated, corrupt, or belong to another configuration.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by the training loop when a loss term or gradient stops being finite.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gmt
