#pragma once

#include <stdexcept>
#include <string>

namespace cmtmae {

// Error taxonomy, mapped to CLI exit codes in tools/: config 2, data 3, numeric 4.
// DimensionError and ContractError indicate caller bugs and map to a generic
// nonzero exit.

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

}  // namespace cmtmae
