#pragma once

#include <stdexcept>
#include <string>

namespace mafr {

// Bad run configuration or command usage. CLI maps this to exit code 1.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or unreadable data files and I/O failures. CLI exit code 2.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values where finite math is required. CLI exit code 3.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace mafr
