#pragma once

#include <stdexcept>
#include <string>

namespace scenestreamer {

/// Base class for every error raised by the library. `exit_code()` is the
/// process exit status the CLI maps the error to.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 4; }
};

// Validation class (exit 3).
class FormatError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class ValidationError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class ConsistencyError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class PairingError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class ConfigError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

// Runtime class (exit 4).
class MapError : public Error {
public:
    using Error::Error;
};

class NoAnchorError : public Error {
public:
    using Error::Error;
};

class PlacementError : public Error {
public:
    using Error::Error;
};

class SamplingError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class MetricError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace scenestreamer
