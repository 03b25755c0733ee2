#pragma once

#include <stdexcept>
#include <string>

namespace pva {

// Base class for all library failures. Subtypes map to CLI exit codes:
// FormatError and ValueError are data errors (2), NumericError is a
// numeric failure (3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or rank disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Bad argument value: nonpositive radius, empty input where data is
// required, invalid configuration, out-of-range category.
class ValueError : public Error {
 public:
  using Error::Error;
};

// Out-of-range index (voxel ids, class ids, sample indices).
class IndexError : public Error {
 public:
  using Error::Error;
};

// On-disk format violation (SSCB records, checkpoints, manifests).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required (NaN loss, bad TSDF).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace pva
