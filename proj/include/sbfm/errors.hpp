#pragma once

#include <stdexcept>
#include <string>

namespace sbfm {

// Shape or rank disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Class label or element index outside its valid range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Caller broke an operation precondition (non-scalar loss, missing gradient, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid hyperparameters or inconsistent configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dataset file missing, short or malformed.
class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint file corrupt, truncated or incompatible with the architecture.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An output file could not be written.
class OutputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sbfm
