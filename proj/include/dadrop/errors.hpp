#pragma once

#include <stdexcept>
#include <string>

namespace dadrop {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration: names the violated invariant.
struct ConfigError : Error {
    using Error::Error;
};

// Input array has the wrong shape for the operation.
struct ShapeError : Error {
    using Error::Error;
};

// An insertion hook returned a feature of a different shape.
struct HookContractError : Error {
    using Error::Error;
};

struct CheckpointError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

// Training produced a non-finite loss.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace dadrop
