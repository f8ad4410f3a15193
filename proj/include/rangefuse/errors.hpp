#pragma once

#include <stdexcept>
#include <string>

namespace rangefuse {

struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& m) : std::runtime_error("dimension error: " + m) {}
};

struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& m) : std::runtime_error("contract error: " + m) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error("config error: " + m) {}
};

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& m) : std::runtime_error("format error: " + m) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& m) : std::runtime_error("i/o error: " + m) {}
};

struct InvalidInputError : std::runtime_error {
  explicit InvalidInputError(const std::string& m) : std::runtime_error("invalid input: " + m) {}
};

struct MetricError : std::runtime_error {
  explicit MetricError(const std::string& m) : std::runtime_error("metric error: " + m) {}
};

}  // namespace rangefuse
