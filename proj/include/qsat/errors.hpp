// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace qsat {

// Extents of two operands disagree, or an extent is not integral.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A layer or channel whose statistics make an operation undefined
// (all-zero weights, zero mean-square, gamma == 0).
class DegenerateError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint container is malformed (magic, version, lengths).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A model cannot be BN-folded (residual connections, unquantized layers,
// already folded).
class ApplicabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Integer accumulator left the representable range.
class OverflowError : public std::overflow_error {
 public:
  using std::overflow_error::overflow_error;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace qsat
