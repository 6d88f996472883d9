#pragma once

#include <stdexcept>
#include <string>

namespace asgk {

// Error taxonomy shared by library and CLI. The CLI maps ConfigError to
// exit code 2 and DataError to exit code 3; everything else is 1.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct IndexError : std::runtime_error {
    explicit IndexError(const std::string& msg) : std::runtime_error("index error: " + msg) {}
};

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error("data error: " + msg) {}
};

struct UndefinedMetricError : std::runtime_error {
    explicit UndefinedMetricError(const std::string& msg)
        : std::runtime_error("undefined metric: " + msg) {}
};

} // namespace asgk
