#pragma once

#include <stdexcept>
#include <string>

namespace scan {

// Shape disagreement between tensors or between a tensor and an operation's
// contract. The message names both shapes involved.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input file (wrong size, wrong magic, unsupported encoding).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration: impossible hyperparameters, missing paths, empty datasets.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid data encountered at run time (non-one-hot label, duplicate ids).
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric failure during training (NaN gradient). Carries the parameter name.
struct DiagnosticsError : std::runtime_error {
    std::string param_name;
    DiagnosticsError(const std::string& msg, std::string param)
        : std::runtime_error(msg), param_name(std::move(param)) {}
};

}  // namespace scan
