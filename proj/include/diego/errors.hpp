#pragma once

#include <stdexcept>
#include <string>

namespace diego {

// Error taxonomy. The CLI maps each class to a distinct exit status.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration value (fractions, priors, hyperparameters).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Unreadable or syntactically malformed input (carries row numbers for CSV).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Structurally valid input that violates the schema (mixed strata, grid shape).
class SchemaError : public Error {
 public:
  using Error::Error;
};

// A domain invariant does not hold; message names the offending field.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Malformed neighbor query (dimension mismatch, k < 1).
class QueryError : public Error {
 public:
  using Error::Error;
};

// Weighted estimation requested with no same-phase neighbors.
class EstimationError : public Error {
 public:
  using Error::Error;
};

// Record routed to a suite whose stratum it does not match.
class RoutingError : public Error {
 public:
  using Error::Error;
};

// Non-finite values in numeric kernels.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Divergence during optimization; message carries epoch/batch coordinates.
class TrainingError : public Error {
 public:
  using Error::Error;
};

// Filesystem failures (missing file, unwritable path).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace diego
