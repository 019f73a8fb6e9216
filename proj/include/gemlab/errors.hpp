#pragma once

#include <stdexcept>
#include <string>

namespace gemlab {

// Exception hierarchy. The CLI maps these onto exit codes:
// ArgumentError/ConfigError/DataError/InfeasibleError -> 1,
// ContractError/FreezeViolation -> 2, NumericError -> 3.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ArgumentError : Error {
  using Error::Error;
};

struct DimensionError : ArgumentError {
  using ArgumentError::ArgumentError;
};

struct RangeError : ArgumentError {
  using ArgumentError::ArgumentError;
};

struct ConfigError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

struct InfeasibleError : Error {
  using Error::Error;
};

struct ContractError : Error {
  using Error::Error;
};

struct FreezeViolation : ContractError {
  using ContractError::ContractError;
};

struct NumericError : Error {
  using Error::Error;
};

}  // namespace gemlab
