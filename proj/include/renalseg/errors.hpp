#pragma once

#include <stdexcept>
#include <string>

namespace renalseg {

/// Bad input data: unreadable files, malformed volumes, violated data
/// preconditions. The CLI maps this to exit code 2.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller misuse: invalid configuration or arguments. Exit code 1.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Geometry of two images that must be paired does not agree.
class GeometryMismatch : public DataError {
public:
    using DataError::DataError;
};

}  // namespace renalseg
