#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace seqdet {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or dimensionality mismatch between tensors.
struct ShapeError : Error {
  using Error::Error;
};

// API misuse: backward() called twice, non-scalar loss, reading a missing
// gradient, invalid configuration combinations.
struct ContractError : Error {
  using Error::Error;
};

// Malformed files (checkpoints, datasets, configs). Messages carry the
// offending location where one is known.
struct IoError : Error {
  using Error::Error;
};

}  // namespace seqdet
