#pragma once

#include <stdexcept>
#include <string>

namespace semi {

// Invalid configuration (bad dims, unknown keys, capacity overflow).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Caller passed data outside an operation's domain (bad index, shape mismatch).
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values, singular systems, overflow.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A training run failed to meet its contract (NaN loss, unmet accuracy target).
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Procedural data generation could not satisfy its postcondition.
struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace semi
