#pragma once

#include <stdexcept>
#include <string>

namespace cloudcast {

// Error taxonomy mirrors the CLI exit codes: config/shape problems (2),
// training failures (3), missing artifacts (4).
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

struct ConfigError : std::invalid_argument {
    explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

struct MissingArtifactError : std::runtime_error {
    explicit MissingArtifactError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cloudcast
