#pragma once

#include <stdexcept>
#include <string>

namespace cimlite {

// File problems (missing, truncated, bad magic). CLI maps these to exit 2.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite losses/updates and other numeric breakdowns. CLI exit 4.
// Invalid configurations throw std::invalid_argument (via require()); CLI exit 3.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cimlite
