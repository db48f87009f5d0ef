#pragma once

#include <stdexcept>
#include <string>

namespace moss {

// Error taxonomy shared by all modules. Everything derives from Error so
// callers (and the CLI) can catch one base type.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad argument values: shape mismatches, out-of-range indices, invalid factors.
struct ArgumentError : Error {
    using Error::Error;
};

// Malformed file header / unparseable sidecar.
struct FormatError : Error {
    using Error::Error;
};

// Header and payload disagree (size mismatch, truncated file).
struct IntegrityError : Error {
    using Error::Error;
};

// Filesystem failures on read/write.
struct IoError : Error {
    using Error::Error;
};

// Mathematically degenerate input: constant image for min-max normalization,
// all-nonpositive SRF column, zero-norm feature vector.
struct DegenerateError : Error {
    using Error::Error;
};

// Numerical failure: singular covariance, NaN loss.
struct NumericError : Error {
    using Error::Error;
};

// Invalid block/model configuration (head count, kernel/dilation combos).
struct ConfigError : Error {
    using Error::Error;
};

// Operation called in the wrong object state (e.g. reparam merge while training).
struct StateError : Error {
    using Error::Error;
};

// Feature disabled by the active ablation mode.
struct NotAvailableError : Error {
    using Error::Error;
};

}  // namespace moss
