// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace moend {

/// Base class for every error raised by the library. The CLI maps each
/// subclass to a distinct exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid model spec, illegal keep ratio / bit width, unknown policy.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Bad caller-supplied data: empty sequences, out-of-range tokens, length mismatches.
class InputError : public Error {
public:
    using Error::Error;
};

class ShapeError : public InputError {
public:
    using InputError::InputError;
};

/// Malformed file or corrupted in-memory block metadata.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Sensitivity table computed for a different model spec.
class StaleCalibrationError : public FormatError {
public:
    using FormatError::FormatError;
};

/// Cache used out of order (append at the wrong position).
class ProtocolError : public Error {
public:
    using Error::Error;
};

/// Operation on a cache in the wrong state (e.g. attend on an empty layer).
class StateError : public Error {
public:
    using Error::Error;
};

/// Budget smaller than the cheapest routing.
class InfeasibleError : public Error {
public:
    InfeasibleError(const std::string& what, double deficit_bytes)
        : Error(what), deficit_bytes_(deficit_bytes) {}

    double deficit_bytes() const { return deficit_bytes_; }

private:
    double deficit_bytes_;
};

/// Exhaustive search requested on an instance that is too large.
class SizeError : public Error {
public:
    using Error::Error;
};

class CalibrationError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace moend
