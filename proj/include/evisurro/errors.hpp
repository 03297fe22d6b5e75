#ifndef EVISURRO_ERRORS_HPP_
#define EVISURRO_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace evisurro {

// Precondition violated by a caller-supplied value (x <= 0 for log_gamma,
// p outside (0,1) for a quantile, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Shapes, lengths or split labels that do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Missing, truncated or malformed files and datasets.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A file written by an incompatible format version.
class VersionError : public DataError {
 public:
  using DataError::DataError;
};

// NaN/Inf encountered during training or evaluation.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace evisurro

#endif  // EVISURRO_ERRORS_HPP_
