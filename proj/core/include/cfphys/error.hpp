// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cfphys {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid argument, shape or configuration supplied by the caller.
class UsageError : public Error {
public:
    using Error::Error;
};

/// Non-finite value or divergence detected during a numeric computation.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Physics integration failure (non-finite state, tunnelling).
class SimulationError : public Error {
public:
    using Error::Error;
};

/// A required artifact (checkpoint, dataset) is missing.
class PrereqError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace cfphys
